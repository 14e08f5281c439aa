"""Exception hierarchy shared across the package."""


class PtecError(Exception):
    """Base class for all library errors."""


class ContractError(PtecError, ValueError):
    """A caller violated an operation's precondition (shape, range, emptiness)."""


class ConfigError(ContractError):
    """Experiment or trainer configuration failed validation."""


class NumericalError(PtecError, ArithmeticError):
    """A NaN/Inf appeared where finite values are required."""


class FileFormatError(PtecError, ValueError):
    """Base class for checkpoint/dataset file failures."""


class BadMagicError(FileFormatError):
    """File does not start with the expected magic tag."""


class UnsupportedVersionError(FileFormatError):
    """File declares a format version this library cannot read."""


class CorruptFileError(FileFormatError):
    """Header and payload disagree (truncation, dim mismatch, bad digest)."""
