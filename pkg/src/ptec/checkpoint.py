"""Binary checkpoints: ``PTECCKPT`` magic, version, JSON header, float64 payload.

Layout (all integers little-endian)::

    8 bytes   magic "PTECCKPT"
    4 bytes   uint32 format version (1)
    8 bytes   uint64 header length in bytes
    N bytes   UTF-8 JSON header
    dim * 8   IEEE-754 float64 parameters
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagicError, CorruptFileError, UnsupportedVersionError

MAGIC = b"PTECCKPT"
VERSION = 1
_PREFIX = struct.Struct("<IQ")
_DIGEST_RE = re.compile(r"^[0-9a-f]{64}$")


def config_digest(config: dict) -> str:
    """SHA-256 of the canonical JSON rendering of ``config``."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass(eq=False)
class Checkpoint:
    params: np.ndarray
    model_kind: str
    round_label: str = ""
    epoch: int = 0
    seed: int = 0
    config_digest: str = ""

    @property
    def dim(self) -> int:
        return int(self.params.size)

    def header(self) -> dict:
        return {"model_kind": self.model_kind, "dim": self.dim, "epoch": self.epoch,
                "round_label": self.round_label, "seed": self.seed,
                "config_digest": self.config_digest}

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.header() == other.header()
                and self.params.tobytes() == other.params.tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = json.dumps(ckpt.header(), sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(ckpt.params, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC + _PREFIX.pack(VERSION, len(header)) + header + payload)


def load_checkpoint(path, expected_digest: str | None = None) -> Checkpoint:
    """Read and validate a checkpoint; nothing is returned on any failure."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    start = len(MAGIC) + _PREFIX.size
    if len(raw) < start:
        raise CorruptFileError(f"{path}: truncated before header length")
    version, hlen = _PREFIX.unpack_from(raw, len(MAGIC))
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < start + hlen:
        raise CorruptFileError(f"{path}: truncated header ({len(raw) - start} of {hlen} bytes)")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header: {exc}") from None
    payload = raw[start + hlen:]
    expected = int(header["dim"]) * 8
    if len(payload) != expected:
        raise CorruptFileError(
            f"{path}: expected {expected} payload bytes, found {len(payload)}")
    digest = header.get("config_digest", "")
    if digest and not _DIGEST_RE.match(digest):
        raise CorruptFileError(f"{path}: malformed config digest {digest!r}")
    if expected_digest is not None and digest != expected_digest:
        raise CorruptFileError(
            f"{path}: config digest {digest} does not match expected {expected_digest}")
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return Checkpoint(params=params, model_kind=header["model_kind"],
                      round_label=header["round_label"], epoch=int(header["epoch"]),
                      seed=int(header["seed"]), config_digest=digest)
