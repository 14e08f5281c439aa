"""CSSL and PTEC trainers and the alternating mutual-initialization protocol.

CSSL descends the source-averaged loss at the shared parameters.  PTEC runs,
for every source independently, ``K`` gradient steps from the shared
parameters and then moves the shared parameters along the average of the
per-source gradients taken at the adapted points (the first-order
hypergradient).  With ``alpha = 0`` the two updates coincide exactly.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import Executor, ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .batching import EpochPlan, epoch_plan, random_batch
from .checkpoint import Checkpoint, save_checkpoint
from .diffcore import SourceObjective, as_params, check_finite
from .errors import ConfigError, ContractError, NumericalError, PtecError
from .metrics import MetricsRecord
from .objectives.data import DataSource
from .optim import GD, INV_SQRT2, LrSchedule, OptimizerChoice, lr_at

log = logging.getLogger(__name__)

COLD_START_GUIDANCE = ("always initialize PTEC with a model trained from CSSL: the "
                       "first-order update assumes near-flat curvature, which holds for "
                       "trained models")


@dataclass(frozen=True)
class CsslConfig:
    lr: LrSchedule
    epochs: int
    batches_per_epoch: int = 1
    optimizer: OptimizerChoice = GD
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"CSSL epochs must be >= 1, got {self.epochs}")
        if self.batches_per_epoch < 1:
            raise ConfigError("batches_per_epoch must be >= 1")
        if self.epochs > self.lr.total_epochs:
            raise ConfigError(
                f"CSSL runs {self.epochs} epochs but its schedule covers {self.lr.total_epochs}")


@dataclass(frozen=True)
class PtecConfig:
    T: int
    K: int
    alpha: LrSchedule
    beta: LrSchedule
    batches_per_epoch: int = 1
    inner_optimizer: OptimizerChoice = GD
    outer_optimizer: OptimizerChoice = GD
    resample_inner_batch: bool = False
    synchronous: bool = True
    seed: int = 0

    @property
    def epochs(self) -> int:
        return math.ceil(self.T / self.batches_per_epoch)

    def validate(self) -> None:
        if self.T < 1 or self.K < 1:
            raise ConfigError(f"need T >= 1 and K >= 1, got T={self.T}, K={self.K}")
        if self.batches_per_epoch < 1:
            raise ConfigError("batches_per_epoch must be >= 1")
        for name, sched in (("alpha", self.alpha), ("beta", self.beta)):
            if self.epochs > sched.total_epochs:
                raise ConfigError(
                    f"PTEC runs {self.epochs} epochs but the {name} schedule covers "
                    f"{sched.total_epochs}")
        if self.synchronous and (
                (self.alpha.warm_epochs, self.alpha.anneal_factor, self.alpha.total_epochs)
                != (self.beta.warm_epochs, self.beta.anneal_factor, self.beta.total_epochs)):
            raise ConfigError("synchronous alpha/beta schedules must share warm epochs, "
                              "anneal factor and total epochs")


def default_cssl_schedule() -> LrSchedule:
    return LrSchedule(2e-4, 60, INV_SQRT2, 80)


def default_ptec_schedules(alpha: float = 1e-4, beta: float = 1e-5) -> tuple[LrSchedule, LrSchedule]:
    return LrSchedule(alpha, 40, INV_SQRT2, 60), LrSchedule(beta, 40, INV_SQRT2, 60)


@dataclass
class TrainState:
    theta: np.ndarray
    iteration: int = 0
    epoch: int = 0
    opt_state: Any = None
    seed: int = 0
    degenerate_batches: int = 0


@dataclass
class TrainResult:
    theta: np.ndarray
    records: list
    state: TrainState


@dataclass(frozen=True)
class LowerSolution:
    phi: np.ndarray
    grad: np.ndarray
    loss: float
    degenerate: bool = False


def _sorted_objectives(objectives: Sequence[SourceObjective]) -> list[SourceObjective]:
    if not objectives:
        raise ContractError("need at least one source objective")
    objs = sorted(objectives, key=lambda o: o.source_id)
    ids = [o.source_id for o in objs]
    if len(set(ids)) != len(ids):
        raise ContractError(f"duplicate source ids {ids}")
    dims = {o.dim for o in objs}
    if len(dims) != 1:
        raise ContractError(f"objectives disagree on parameter dimension: {dims}")
    return objs


def _mean_grad(grads: Sequence[np.ndarray]) -> np.ndarray:
    """Mean shifted by the first gradient: ``g0 + sum(g_i - g0) / M``.

    Identical inputs give back ``g0`` bit-for-bit, which a plain ``sum / M``
    does not for M = 3, 5, 6, ...; the fixed left-to-right order keeps the
    result reproducible regardless of how the gradients were computed.
    """
    base = grads[0]
    total = np.zeros_like(base)
    for g in grads[1:]:
        total += g - base
    return base + total / len(grads)


@contextmanager
def _pool(workers: int | None, n_tasks: int):
    if workers is None:
        workers = n_tasks
    if workers <= 1 or n_tasks <= 1:
        yield None
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            yield ex


def _map(executor: Executor | None, fn: Callable, n: int) -> list:
    if executor is None:
        return [fn(i) for i in range(n)]
    return list(executor.map(fn, range(n)))


def solve_lower(obj: SourceObjective, theta: np.ndarray, K: int, alpha: float, batch=None,
                optimizer: OptimizerChoice = GD, inner_batches=None) -> LowerSolution:
    """K inner steps from a private copy of ``theta``, then loss/grad at ``phi_K``.

    The scheduled ``batch`` drives every inner step unless ``inner_batches``
    (one per step) is given. The final gradient is always taken on ``batch``.
    """
    if K < 1:
        raise ContractError(f"K must be >= 1, got {K}")
    phi = np.array(theta, dtype=np.float64)
    opt_state = optimizer.init_state(phi.size)
    batch = obj.prepare(batch)
    for k in range(1, K + 1):
        step_batch = batch if inner_batches is None else inner_batches[k - 1]
        g = obj.grad(phi, step_batch)
        try:
            phi, opt_state = optimizer.update(opt_state, phi, g, alpha)
            check_finite(phi, "local parameters")
        except NumericalError as exc:
            raise NumericalError(f"source {obj.source_id}, inner step {k}: {exc}") from None
    loss, grad, degenerate = obj.evaluate(phi, batch)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NumericalError(f"source {obj.source_id}: non-finite loss/grad at phi_{K}")
    return LowerSolution(phi=phi, grad=grad, loss=float(loss), degenerate=degenerate)


def _record(state: TrainState, objs, losses, avg, lr_alpha, lr_beta, degenerate) -> MetricsRecord:
    local = {o.source_id: float(l) for o, l in zip(objs, losses)}
    return MetricsRecord(iteration=state.iteration, epoch=state.epoch, local_losses=local,
                         global_loss=float(sum(losses) / len(losses)),
                         grad_norm=float(np.linalg.norm(avg)), lr_alpha=float(lr_alpha),
                         lr_beta=float(lr_beta), degenerate_batches=int(degenerate))


def _outer_update(state: TrainState, optimizer: OptimizerChoice, avg: np.ndarray,
                  lr: float) -> tuple[np.ndarray, Any]:
    theta, opt_state = optimizer.update(state.opt_state, state.theta, avg, lr)
    check_finite(theta, "shared parameters")
    return theta, opt_state


def cssl_step(state: TrainState, objectives: Sequence[SourceObjective], batches: Sequence,
              lr: float, optimizer: OptimizerChoice = GD,
              executor: Executor | None = None) -> tuple[TrainState, MetricsRecord]:
    """One descent step on the source-averaged loss at the shared parameters."""
    objs = _sorted_objectives(objectives)
    theta = state.theta

    def evaluate(i):
        loss, grad, degenerate = objs[i].evaluate(theta, batches[i])
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NumericalError(f"source {objs[i].source_id}: non-finite loss or gradient")
        return float(loss), grad, degenerate

    results = _map(executor, evaluate, len(objs))
    avg = _mean_grad([r[1] for r in results])
    new_theta, opt_state = _outer_update(state, optimizer, avg, lr)
    n_degenerate = sum(r[2] for r in results)
    new_state = replace(state, theta=new_theta, opt_state=opt_state,
                        iteration=state.iteration + 1,
                        degenerate_batches=state.degenerate_batches + n_degenerate)
    rec = _record(new_state, objs, [r[0] for r in results], avg, 0.0, lr, n_degenerate)
    return new_state, rec


def ptec_outer_gradient(objectives: Sequence[SourceObjective], theta: np.ndarray,
                        batches: Sequence, alpha: float, K: int,
                        inner_optimizer: OptimizerChoice = GD,
                        inner_batches: Sequence | None = None,
                        executor: Executor | None = None) -> tuple[np.ndarray, list[LowerSolution]]:
    """First-order hypergradient: mean over sources of ``grad g_i(phi^i_K)``.

    ``batches`` and ``inner_batches`` are indexed like the objectives sorted
    by ascending source id. Results are aggregated in that order, so the
    value does not depend on how the solves were scheduled.
    """
    objs = _sorted_objectives(objectives)

    def lower(i):
        return solve_lower(objs[i], theta, K, alpha, batches[i], inner_optimizer,
                           None if inner_batches is None else inner_batches[i])

    sols = _map(executor, lower, len(objs))
    return _mean_grad([s.grad for s in sols]), sols


def ptec_iteration(state: TrainState, objectives: Sequence[SourceObjective], batches: Sequence,
                   alpha: float, beta: float, K: int,
                   inner_optimizer: OptimizerChoice = GD, outer_optimizer: OptimizerChoice = GD,
                   inner_batches: Sequence | None = None,
                   executor: Executor | None = None) -> tuple[TrainState, MetricsRecord]:
    """Solve every lower-level problem (possibly in parallel), then update ``theta``."""
    objs = _sorted_objectives(objectives)
    avg, sols = ptec_outer_gradient(objs, state.theta, batches, alpha, K, inner_optimizer,
                                    inner_batches, executor)
    new_theta, opt_state = _outer_update(state, outer_optimizer, avg, beta)
    n_degenerate = sum(s.degenerate for s in sols)
    new_state = replace(state, theta=new_theta, opt_state=opt_state,
                        iteration=state.iteration + 1,
                        degenerate_batches=state.degenerate_batches + n_degenerate)
    rec = _record(new_state, objs, [s.loss for s in sols], avg, alpha, beta, n_degenerate)
    return new_state, rec


def _initial_theta(objs, theta_init, seed: int) -> np.ndarray:
    if theta_init is None:
        return objs[0].initial_params(np.random.default_rng([seed, 0x1417]))
    theta = as_params(theta_init)
    if theta.size != objs[0].dim:
        raise ContractError(f"initial parameters have dim {theta.size}, model needs {objs[0].dim}")
    return theta


def _check_sources(objs, sources):
    if sources is None:
        return
    ids = sorted(s.source_id for s in sources)
    if ids != [o.source_id for o in objs]:
        raise ContractError(f"sources {ids} do not match objectives "
                            f"{[o.source_id for o in objs]}")


def _batches_for(plan: EpochPlan | None, j: int, M: int) -> list:
    return [None] * M if plan is None else plan.batches_at(j)


def cssl_train(config: CsslConfig, objectives: Sequence[SourceObjective],
               sources: Sequence[DataSource] | None, theta_init=None, *,
               workers: int | None = None, opt_state=None,
               on_epoch_end: Callable[[TrainState], None] | None = None) -> TrainResult:
    """Run ``epochs * batches_per_epoch`` CSSL steps.

    ``sources=None`` means full-batch objectives that ignore their batch.
    ``theta_init=None`` draws initial parameters from ``config.seed``.
    """
    config.validate()
    objs = _sorted_objectives(objectives)
    _check_sources(objs, sources)
    state = TrainState(theta=_initial_theta(objs, theta_init, config.seed),
                       opt_state=opt_state, seed=config.seed)
    records = []
    bpe = config.batches_per_epoch
    with _pool(workers, len(objs)) as ex:
        for epoch in range(1, config.epochs + 1):
            plan = None if sources is None else epoch_plan(sources, bpe, config.seed, epoch)
            lr = lr_at(config.lr, epoch)
            state = replace(state, epoch=epoch)
            for j in range(bpe):
                state, rec = cssl_step(state, objs, _batches_for(plan, j, len(objs)), lr,
                                       config.optimizer, ex)
                records.append(rec)
            if on_epoch_end is not None:
                on_epoch_end(state)
    return TrainResult(theta=state.theta, records=records, state=state)


def ptec_train(config: PtecConfig, objectives: Sequence[SourceObjective],
               sources: Sequence[DataSource] | None, theta_init=None, *,
               cold_start: bool = False, workers: int | None = None, opt_state=None,
               on_epoch_end: Callable[[TrainState], None] | None = None) -> TrainResult:
    """Run ``T`` PTEC iterations; one epoch consumes every source's batch list once.

    ``theta_init`` should be a CSSL-trained model. Starting without one needs
    ``cold_start=True``.
    """
    config.validate()
    if theta_init is None and not cold_start:
        raise ConfigError(f"PTEC needs initial parameters ({COLD_START_GUIDANCE}); "
                          "pass cold_start=True to override")
    if theta_init is None:
        log.warning("cold-starting PTEC; %s", COLD_START_GUIDANCE)
    objs = _sorted_objectives(objectives)
    _check_sources(objs, sources)
    state = TrainState(theta=_initial_theta(objs, theta_init, config.seed),
                       opt_state=opt_state, seed=config.seed)
    by_id = {s.source_id: s for s in sources} if sources is not None else {}
    records = []
    bpe = config.batches_per_epoch
    plan = None
    with _pool(workers, len(objs)) as ex:
        for t in range(1, config.T + 1):
            epoch, j = (t - 1) // bpe + 1, (t - 1) % bpe
            if j == 0:
                state = replace(state, epoch=epoch)
                if sources is not None:
                    plan = epoch_plan(sources, bpe, config.seed, epoch)
            alpha, beta = lr_at(config.alpha, epoch), lr_at(config.beta, epoch)
            inner = None
            if config.resample_inner_batch and plan is not None:
                inner = []
                for o in objs:
                    rng = np.random.default_rng([config.seed, t, o.source_id, 0x5EED])
                    size = plan.batch_sizes[o.source_id]
                    inner.append([random_batch(by_id[o.source_id], size, rng)
                                  for _ in range(config.K)])
            state, rec = ptec_iteration(state, objs, _batches_for(plan, j, len(objs)),
                                        alpha, beta, config.K, config.inner_optimizer,
                                        config.outer_optimizer, inner, ex)
            records.append(rec)
            if on_epoch_end is not None and (j == bpe - 1 or t == config.T):
                on_epoch_end(state)
    return TrainResult(theta=state.theta, records=records, state=state)


class RoundFailure(PtecError):
    """A mutual-initialization round failed; ``completed`` holds earlier checkpoints."""

    def __init__(self, message: str, completed: list):
        super().__init__(message)
        self.completed = completed


@dataclass
class RoundsResult:
    checkpoints: list
    metrics: dict = field(default_factory=dict)

    def by_label(self, label: str) -> Checkpoint:
        for c in self.checkpoints:
            if c.round_label == label:
                return c
        raise KeyError(label)


def checkpoint_filename(label: str) -> str:
    return f"{label.lower()}.ckpt"


def mutual_init_rounds(cssl_config: CsslConfig, ptec_config: PtecConfig,
                       objectives: Sequence[SourceObjective],
                       sources: Sequence[DataSource] | None, rounds: int, *,
                       theta0=None, checkpoint_dir=None, model_kind: str = "",
                       config_digest: str = "", workers: int | None = None,
                       persist_optimizer_state: bool = False) -> RoundsResult:
    """CSSL.1, PTEC.1, CSSL.2, ... with each run initialized from the previous one.

    CSSL.1 starts from ``theta0`` (or a seeded random draw). Each finished
    checkpoint is written to ``checkpoint_dir`` immediately, so a failing
    round leaves the earlier ones on disk.
    """
    if rounds < 1:
        raise ConfigError(f"rounds must be >= 1, got {rounds}")
    cssl_config.validate()
    ptec_config.validate()
    out = RoundsResult(checkpoints=[])
    theta, opt_state = theta0, None
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    def keep(label, result, epochs, seed):
        ckpt = Checkpoint(params=result.theta.copy(), model_kind=model_kind, round_label=label,
                          epoch=epochs, seed=seed, config_digest=config_digest)
        out.checkpoints.append(ckpt)
        out.metrics[label] = result.records
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / checkpoint_filename(label), ckpt)

    for r in range(1, rounds + 1):
        for kind in ("CSSL", "PTEC"):
            label = f"{kind}.{r}"
            carried = opt_state if persist_optimizer_state else None
            try:
                if kind == "CSSL":
                    res = cssl_train(cssl_config, objectives, sources, theta,
                                     workers=workers, opt_state=carried)
                    keep(label, res, cssl_config.epochs, cssl_config.seed)
                else:
                    res = ptec_train(ptec_config, objectives, sources, theta,
                                     workers=workers, opt_state=carried)
                    keep(label, res, ptec_config.epochs, ptec_config.seed)
            except PtecError as exc:
                raise RoundFailure(f"{label} failed: {exc}", list(out.checkpoints)) from exc
            theta, opt_state = res.theta, res.state.opt_state
    return out
