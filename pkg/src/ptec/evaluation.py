"""Adaptation evaluation: how well a checkpoint fine-tunes on each source.

A checkpoint is adapted with ``steps`` plain gradient steps on a source's
training batches and scored by its loss on held-out batches after every
step.  The mean final loss over sources is an empirical estimate of the
bilevel objective when ``steps == K``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .batching import proportional_batch_size
from .diffcore import SourceObjective
from .errors import ContractError, NumericalError
from .objectives.data import Batch, DataSource
from .optim import sgd_step


@dataclass(frozen=True)
class AdaptationReport:
    label: str
    source_id: int
    losses: tuple
    lr: float
    steps: int

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def adapt(theta, obj: SourceObjective, steps: int, lr: float,
          train_batches: Sequence = (None,)) -> list[np.ndarray]:
    """Iterates ``[phi_0, ..., phi_steps]``; step ``k`` uses ``train_batches[k % n]``."""
    if steps < 0:
        raise ContractError(f"steps must be >= 0, got {steps}")
    if len(train_batches) == 0:
        raise ContractError("need at least one training batch")
    phis = [np.array(theta, dtype=np.float64)]
    train_batches = [obj.prepare(b) for b in train_batches]
    for k in range(steps):
        g = obj.grad(phis[-1], train_batches[k % len(train_batches)])
        try:
            phis.append(sgd_step(phis[-1], g, lr))
        except NumericalError as exc:
            raise NumericalError(f"source {obj.source_id}, adaptation step {k + 1}: {exc}") from None
    return phis


def adapt_and_eval(theta, obj: SourceObjective, steps: int, lr: float,
                   train_batches: Sequence = (None,), eval_batches: Sequence = (None,),
                   label: str = "") -> AdaptationReport:
    if len(eval_batches) == 0:
        raise ContractError("need at least one evaluation batch")
    eval_batches = [obj.prepare(b) for b in eval_batches]
    losses = []
    for k, phi in enumerate(adapt(theta, obj, steps, lr, train_batches)):
        loss = float(np.mean([obj.loss(phi, b) for b in eval_batches]))
        if not np.isfinite(loss):
            raise NumericalError(f"source {obj.source_id}: non-finite loss after step {k}")
        losses.append(loss)
    return AdaptationReport(label=label, source_id=obj.source_id, losses=tuple(losses),
                            lr=lr, steps=steps)


def mean_post_adaptation_loss(reports: Sequence[AdaptationReport]) -> float:
    """Unweighted mean over sources of the final adapted loss."""
    if not reports:
        raise ContractError("no adaptation reports")
    steps = {r.steps for r in reports}
    if len(steps) != 1:
        raise ContractError(f"reports disagree on adaptation steps: {sorted(steps)}")
    return float(np.mean([r.final_loss for r in reports]))


@dataclass(frozen=True)
class Comparison:
    deltas: dict
    mean_delta: float
    a_wins: int
    b_wins: int


def compare_runs(reports_a: Sequence[AdaptationReport],
                 reports_b: Sequence[AdaptationReport]) -> Comparison:
    """Per-source ``A - B`` final-loss deltas; positive means B adapted better."""
    a = {r.source_id: r for r in reports_a}
    b = {r.source_id: r for r in reports_b}
    if set(a) != set(b):
        raise ContractError(f"source sets differ: {sorted(a)} vs {sorted(b)}")
    if {r.steps for r in reports_a} != {r.steps for r in reports_b}:
        raise ContractError("runs used different adaptation steps")
    deltas = {sid: a[sid].final_loss - b[sid].final_loss for sid in sorted(a)}
    vals = list(deltas.values())
    return Comparison(deltas=deltas, mean_delta=float(np.mean(vals)),
                      a_wins=sum(v < 0 for v in vals), b_wins=sum(v > 0 for v in vals))


@dataclass(frozen=True)
class AdaptationBatches:
    train: list
    eval: list


def adaptation_batches(source: DataSource, batches_per_epoch: int, steps: int,
                       seed: int) -> AdaptationBatches:
    """Fixed train/held-out batches for evaluating one source.

    Training batches have the size the scheduler would use; the held-out
    set is scored as one batch (or the training pool if nothing was held out).
    """
    rng = np.random.default_rng([seed, source.source_id, 0xEA1])
    size = proportional_batch_size(source.size_weight, batches_per_epoch)
    n = len(source.samples)
    train = []
    for _ in range(max(steps, 1)):
        idx = rng.choice(n, min(size, n), replace=False)
        train.append(Batch(source.source_id, [source.samples[i] for i in idx],
                           int(rng.integers(0, 2 ** 63))))
    pool = source.heldout if source.heldout else source.samples
    held = [Batch(source.source_id, pool, int(rng.integers(0, 2 ** 63)))]
    return AdaptationBatches(train=train, eval=held)


def evaluate_checkpoint(theta, objectives: Sequence[SourceObjective], steps: int, lr: float,
                        sources: Sequence[DataSource] | None = None,
                        batches_per_epoch: int = 1, seed: int = 0,
                        label: str = "") -> list[AdaptationReport]:
    """One report per objective, ascending source id."""
    by_id = {s.source_id: s for s in sources} if sources is not None else {}
    reports = []
    for obj in sorted(objectives, key=lambda o: o.source_id):
        if sources is None:
            train, held = [None], [None]
        else:
            ab = adaptation_batches(by_id[obj.source_id], batches_per_epoch, steps, seed)
            train, held = ab.train, ab.eval
        reports.append(adapt_and_eval(theta, obj, steps, lr, train, held, label))
    return reports
