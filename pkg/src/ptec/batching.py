"""Per-epoch batch plans that balance unequal sources.

Batch sizes are proportional to each source's size weight so that every
source yields about ``batches_per_epoch`` batches; surplus batches are
skipped at random and short lists are padded by cycling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError
from .objectives.data import Batch, DataSource


@dataclass
class EpochPlan:
    batches: dict[int, list[Batch]]
    batch_sizes: dict[int, int]
    skipped: dict[int, list[int]] = field(default_factory=dict)
    padded: dict[int, int] = field(default_factory=dict)
    short_sources: list[int] = field(default_factory=list)

    @property
    def source_ids(self) -> list[int]:
        return sorted(self.batches)

    @property
    def num_batches(self) -> int:
        return min(len(b) for b in self.batches.values())

    def batches_at(self, j: int) -> list[Batch]:
        """The ``j``-th batch of every source, ascending source id."""
        return [self.batches[sid][j] for sid in self.source_ids]


def proportional_batch_size(size_weight: float, batches_per_epoch: int) -> int:
    return max(1, math.floor(size_weight / batches_per_epoch + 0.5))


def schedule_batches(sources: Sequence[DataSource], batches_per_epoch: int,
                     rng: np.random.Generator) -> EpochPlan:
    """Split each source into exactly ``batches_per_epoch`` batches.

    A source whose samples cannot fill one batch contributes a single short
    batch (listed in ``short_sources``) that is cycled to fill the epoch.
    Surplus full batches are dropped uniformly at random without
    replacement; the dropped chunk positions are kept in ``skipped``.
    """
    if batches_per_epoch < 1:
        raise ContractError(f"batches_per_epoch must be >= 1, got {batches_per_epoch}")
    plan = EpochPlan(batches={}, batch_sizes={})
    for src in sorted(sources, key=lambda s: s.source_id):
        n = len(src.samples)
        if n == 0:
            raise ContractError(f"source {src.source_id} has no samples")
        size = proportional_batch_size(src.size_weight, batches_per_epoch)
        order = rng.permutation(n)
        if n < size:
            chunks = [order]
            plan.short_sources.append(src.source_id)
        else:
            chunks = [order[k * size:(k + 1) * size] for k in range(n // size)]
        skipped: list[int] = []
        if len(chunks) > batches_per_epoch:
            skipped = sorted(rng.choice(len(chunks), len(chunks) - batches_per_epoch,
                                        replace=False).tolist())
            dropped = set(skipped)
            chunks = [c for k, c in enumerate(chunks) if k not in dropped]
        pad = batches_per_epoch - len(chunks)
        chunks = [chunks[k % len(chunks)] for k in range(batches_per_epoch)]
        seeds = rng.integers(0, 2 ** 63, size=batches_per_epoch)
        plan.batches[src.source_id] = [
            Batch(src.source_id, [src.samples[i] for i in chunk], int(seed))
            for chunk, seed in zip(chunks, seeds)]
        plan.batch_sizes[src.source_id] = size
        plan.skipped[src.source_id] = skipped
        plan.padded[src.source_id] = pad
    return plan


def epoch_plan(sources: Sequence[DataSource], batches_per_epoch: int, seed: int,
               epoch: int) -> EpochPlan:
    """Plan for 1-based ``epoch``; reshuffled each epoch, reproducible from ``seed``."""
    return schedule_batches(sources, batches_per_epoch, np.random.default_rng([seed, epoch]))


def random_batch(source: DataSource, size: int, rng: np.random.Generator) -> Batch:
    """Fresh batch of ``size`` samples (or all, if fewer) drawn without replacement."""
    n = len(source.samples)
    idx = rng.choice(n, min(size, n), replace=False)
    return Batch(source.source_id, [source.samples[i] for i in idx],
                 int(rng.integers(0, 2 ** 63)))
