"""Parameter vectors, the per-source objective contract, and gradient checking.

Parameters and gradients are plain 1-D ``float64`` numpy arrays.  Every
objective in the package ships an analytic gradient; :func:`finite_diff_grad`
is the independent oracle those gradients are checked against.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ContractError, NumericalError

DEFAULT_FD_STEP = 1e-5


def as_params(values, *, copy: bool = True) -> np.ndarray:
    """Coerce ``values`` to a finite 1-D float64 parameter vector."""
    arr = np.array(values, dtype=np.float64, copy=copy)
    if arr.ndim != 1:
        raise ContractError(f"parameter vector must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ContractError("parameter vector must have positive dimension")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise NumericalError(f"non-finite parameter at index {bad}")
    return arr


def check_finite(vec: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(vec)):
        bad = int(np.flatnonzero(~np.isfinite(vec))[0])
        raise NumericalError(f"{what}: non-finite value at index {bad}")


def check_same_dim(a: np.ndarray, b: np.ndarray, what: str = "vectors") -> None:
    if a.shape != b.shape:
        raise ContractError(f"{what} dimension mismatch: {a.shape} vs {b.shape}")


class SourceObjective(abc.ABC):
    """Differentiable loss ``g_i`` attached to one data source.

    Implementations must be pure: ``loss``/``grad`` may not mutate the
    objective, so several workers can evaluate one instance concurrently.
    ``batch`` is opaque here; full-batch objectives accept ``None``.
    """

    source_id: int

    @property
    @abc.abstractmethod
    def dim(self) -> int:
        ...

    @abc.abstractmethod
    def loss_grad(self, params: np.ndarray, batch: Any) -> tuple[float, np.ndarray]:
        """Return ``(loss, grad)``; ``grad`` is freshly allocated."""

    def loss(self, params: np.ndarray, batch: Any) -> float:
        return self.loss_grad(params, batch)[0]

    def grad(self, params: np.ndarray, batch: Any) -> np.ndarray:
        return self.loss_grad(params, batch)[1]

    def prepare(self, batch: Any) -> Any:
        """Precompute whatever of ``batch`` does not depend on the parameters.

        The result is accepted wherever a batch is; repeated evaluations on
        one batch (inner steps, finite-difference probes) should prepare once.
        """
        return batch

    def degenerate(self, batch: Any) -> bool:
        """True when ``batch`` yields no training signal (flagged in metrics)."""
        return False

    def evaluate(self, params: np.ndarray, batch: Any) -> tuple[float, np.ndarray, bool]:
        """``(loss, grad, degenerate)`` in one pass."""
        loss, grad = self.loss_grad(params, batch)
        return loss, grad, self.degenerate(batch)

    def initial_params(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.dim)


def finite_diff_grad(obj: SourceObjective, params, batch: Any = None,
                     h: float = DEFAULT_FD_STEP) -> np.ndarray:
    """Central-difference gradient of ``obj.loss`` at ``params``.

    Component ``j`` is ``(loss(p + h e_j) - loss(p - h e_j)) / (2h)``.
    """
    if not h > 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    p = as_params(params)
    batch = obj.prepare(batch)
    out = np.empty_like(p)
    probe = p.copy()
    for j in range(p.size):
        probe[j] = p[j] + h
        up = obj.loss(probe, batch)
        probe[j] = p[j] - h
        down = obj.loss(probe, batch)
        probe[j] = p[j]
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericalError(f"non-finite loss while probing component {j}")
        out[j] = (up - down) / (2.0 * h)
    return out


@dataclass(frozen=True)
class CheckReport:
    max_rel_error: float
    passed: bool
    worst_index: int
    dim: int


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Componentwise error scaled by the larger of the two gradients' max-norms.

    Scaling by the gradient's magnitude (rather than each component's own)
    keeps components that are legitimately ~0 from reporting spurious
    relative errors of order one.
    """
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    diff = np.abs(analytic - numeric)
    if scale == 0.0:
        return diff
    return diff / scale


def grad_check(obj: SourceObjective, params, batch: Any = None,
               h: float = DEFAULT_FD_STEP, tol: float = 1e-7) -> CheckReport:
    """Compare ``obj.grad`` against :func:`finite_diff_grad`.

    Never raises on a failed comparison; the verdict is in ``passed``.
    """
    if not tol > 0:
        raise ContractError(f"tolerance must be positive, got {tol}")
    if obj.dim < 1:
        raise ContractError("objective has zero dimension")
    p = as_params(params)
    batch = obj.prepare(batch)
    analytic = np.asarray(obj.grad(p, batch), dtype=np.float64)
    numeric = finite_diff_grad(obj, p, batch, h)
    if analytic.shape != numeric.shape:
        raise ContractError(
            f"analytic gradient has shape {analytic.shape}, "
            f"finite differences {numeric.shape}")
    errs = relative_errors(analytic, numeric)
    worst = int(np.argmax(errs))
    max_err = float(errs[worst])
    return CheckReport(max_rel_error=max_err, passed=max_err <= tol,
                       worst_index=worst, dim=p.size)
