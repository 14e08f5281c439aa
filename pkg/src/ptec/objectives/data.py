"""Synthetic heterogeneous sources and their on-disk format.

Each source emits frame sequences from its own stationary Gaussian AR(1)
process: marginally every frame is ``N(mean, diag(scale**2))`` and ``rho``
sets the correlation between consecutive frames.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import BadMagicError, ContractError, CorruptFileError, UnsupportedVersionError

# Pre-training hours per domain of a multi-domain English corpus; handy as
# relative source sizes for unbalanced experiments.
MULTI_DOMAIN_HOURS = {
    "broadcast_news": 420,
    "viavoice": 450,
    "ami_meetings": 80,
    "gb_english": 183,
    "librispeech": 860,
}

DATA_MAGIC = b"PTECDATA"
DATA_VERSION = 1


@dataclass(frozen=True, eq=False)
class Sample:
    """One frame sequence. ``uid`` is unique within its source."""

    frames: np.ndarray
    uid: int = 0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ContractError(f"sample must be (frames>=1, dim), got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ContractError(f"sample {self.uid} has non-finite entries")
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True, eq=False)
class Batch:
    """Samples from one source plus the seed that drives their masking."""

    source_id: int
    samples: tuple
    seed: int = 0

    def __post_init__(self):
        if len(self.samples) == 0:
            raise ContractError("batch must contain at least one sample")
        object.__setattr__(self, "samples", tuple(self.samples))


@dataclass
class DataSource:
    source_id: int
    name: str
    samples: list
    size_weight: float
    heldout: list = field(default_factory=list)

    def __post_init__(self):
        if (self.size_weight > 0) != (len(self.samples) > 0):
            raise ContractError(
                f"source {self.source_id}: size_weight > 0 iff samples nonempty "
                f"(weight={self.size_weight}, samples={len(self.samples)})")

    @property
    def feature_dim(self) -> int:
        return self.samples[0].frames.shape[1]


@dataclass(frozen=True)
class SourceShift:
    """Distribution parameters of one source."""

    mean: np.ndarray
    scale: np.ndarray
    rho: float = 0.0


def random_shifts(num_sources: int, feature_dim: int, seed: int,
                  mean_spread: float = 1.0, scale_range=(0.5, 1.5),
                  rho: float = 0.8) -> list[SourceShift]:
    """Distinct per-source means and scales drawn from ``seed``."""
    rng = np.random.default_rng([seed, 0xD1F])
    return [SourceShift(mean=mean_spread * rng.standard_normal(feature_dim),
                        scale=rng.uniform(*scale_range, size=feature_dim),
                        rho=rho)
            for _ in range(num_sources)]


def _ar1_frames(rng, shift: SourceShift, num_frames: int, feature_dim: int) -> np.ndarray:
    z = np.empty((num_frames, feature_dim))
    z[0] = rng.standard_normal(feature_dim)
    innov = np.sqrt(1.0 - shift.rho ** 2)
    for t in range(1, num_frames):
        z[t] = shift.rho * z[t - 1] + innov * rng.standard_normal(feature_dim)
    return shift.mean + shift.scale * z


def generate_synthetic_sources(shifts: Sequence[SourceShift], counts: Sequence[int],
                               num_frames: int, seed: int,
                               heldout_fraction: float = 0.2,
                               names: Sequence[str] | None = None) -> list[DataSource]:
    """Draw ``counts[i]`` sequences for source ``i``; deterministic in ``seed``.

    The last ``round(heldout_fraction * count)`` samples of each source are
    held out for adaptation evaluation. ``size_weight`` is the total count.
    """
    M = len(shifts)
    if M < 1:
        raise ContractError("need at least one source")
    if len(counts) != M:
        raise ContractError(f"{len(counts)} counts for {M} sources")
    if any(int(n) < 1 for n in counts):
        raise ContractError("every source needs at least one sample")
    if num_frames < 1:
        raise ContractError("num_frames must be >= 1")
    if not 0.0 <= heldout_fraction < 1.0:
        raise ContractError("heldout_fraction must be in [0, 1)")
    if names is None:
        names = [f"source{i}" for i in range(M)]
    feature_dim = np.asarray(shifts[0].mean).size
    sources = []
    for i, (shift, n) in enumerate(zip(shifts, counts)):
        if np.asarray(shift.mean).size != feature_dim:
            raise ContractError("all sources must share the feature dimension")
        rng = np.random.default_rng([seed, i])
        samples = [Sample(_ar1_frames(rng, shift, num_frames, feature_dim), uid=u)
                   for u in range(int(n))]
        n_held = int(round(heldout_fraction * int(n)))
        n_held = min(n_held, int(n) - 1)
        train, held = samples[:int(n) - n_held], samples[int(n) - n_held:]
        sources.append(DataSource(source_id=i, name=names[i], samples=train,
                                  size_weight=float(n), heldout=held))
    return sources


def save_sources(path, sources: Sequence[DataSource], seed: int) -> None:
    """Persist sources: magic, version, JSON header, then float64 LE frames.

    Frames are written source by source, training samples then held-out
    samples, each sample as ``frames x feature_dim`` row-major.
    """
    header = {
        "M": len(sources),
        "feature_dim": sources[0].feature_dim,
        "frames": [[s.num_frames for s in src.samples + src.heldout] for src in sources],
        "counts": [len(src.samples) for src in sources],
        "heldout_counts": [len(src.heldout) for src in sources],
        "names": [src.name for src in sources],
        "size_weights": [src.size_weight for src in sources],
        "seed": seed,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<IQ", DATA_VERSION, len(blob)))
        fh.write(blob)
        for src in sources:
            for s in src.samples + src.heldout:
                fh.write(s.frames.astype("<f8").tobytes())


def load_sources(path) -> tuple[list[DataSource], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != DATA_MAGIC:
        raise BadMagicError(f"{path}: not a dataset file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != DATA_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported dataset version {version}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw, dtype="<f8", offset=20 + hlen).astype(np.float64)
    d = header["feature_dim"]
    expected = sum(sum(f) for f in header["frames"]) * d
    if payload.size != expected:
        raise CorruptFileError(
            f"{path}: expected {expected * 8} payload bytes, found {payload.size * 8}")
    sources, pos = [], 0
    for i in range(header["M"]):
        samples = []
        for u, nf in enumerate(header["frames"][i]):
            samples.append(Sample(payload[pos:pos + nf * d].reshape(nf, d), uid=u))
            pos += nf * d
        n_train = header["counts"][i]
        sources.append(DataSource(source_id=i, name=header["names"][i],
                                  samples=samples[:n_train],
                                  size_weight=header["size_weights"][i],
                                  heldout=samples[n_train:]))
    return sources, header
