"""Gradient-descent and AdamW updates plus the warm-then-anneal schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .diffcore import check_finite, check_same_dim
from .errors import ConfigError, ContractError


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    """``params - lr * grad`` as a new array."""
    check_same_dim(params, grad, "params/grad")
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    check_finite(grad, "gradient")
    return params - lr * grad


@dataclass(frozen=True)
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def zeros(cls, dim: int, **hyper) -> "AdamWState":
        return cls(m=np.zeros(dim), v=np.zeros(dim), **hyper)


def adamw_step(state: AdamWState, params: np.ndarray, grad: np.ndarray,
               lr: float) -> tuple[np.ndarray, AdamWState]:
    """One Adam update with bias correction and decoupled weight decay."""
    check_same_dim(params, grad, "params/grad")
    check_same_dim(params, state.m, "params/first moment")
    check_finite(grad, "gradient")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    decayed = params * (1.0 - lr * state.weight_decay)
    new = decayed - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, m=m, v=v, step=t)


@dataclass(frozen=True)
class LrSchedule:
    """Constant for ``warm_epochs`` epochs, then multiplied by ``anneal_factor`` per epoch.

    A zero ``initial_lr`` is allowed and freezes the corresponding update.
    """

    initial_lr: float
    warm_epochs: int
    anneal_factor: float
    total_epochs: int

    def __post_init__(self):
        if not self.initial_lr >= 0:
            raise ConfigError(f"initial_lr must be >= 0, got {self.initial_lr}")
        if not 0 < self.anneal_factor <= 1:
            raise ConfigError(f"anneal_factor must be in (0, 1], got {self.anneal_factor}")
        if self.total_epochs < 1 or not 0 <= self.warm_epochs <= self.total_epochs:
            raise ConfigError(
                f"need 0 <= warm_epochs <= total_epochs and total_epochs >= 1, "
                f"got warm={self.warm_epochs} total={self.total_epochs}")

    @classmethod
    def constant(cls, lr: float, epochs: int) -> "LrSchedule":
        return cls(lr, epochs, 1.0, epochs)


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``."""
    if not 1 <= epoch <= schedule.total_epochs:
        raise ContractError(f"epoch {epoch} outside [1, {schedule.total_epochs}]")
    if epoch <= schedule.warm_epochs:
        return schedule.initial_lr
    return schedule.initial_lr * schedule.anneal_factor ** (epoch - schedule.warm_epochs)


INV_SQRT2 = 1.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class OptimizerChoice:
    kind: Literal["gd", "adamw"] = "gd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.kind not in ("gd", "adamw"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")

    def init_state(self, dim: int) -> AdamWState | None:
        if self.kind == "gd":
            return None
        return AdamWState.zeros(dim, beta1=self.beta1, beta2=self.beta2,
                                eps=self.eps, weight_decay=self.weight_decay)

    def update(self, state, params, grad, lr):
        """Apply one step; returns ``(params, state)``."""
        if self.kind == "gd":
            return sgd_step(params, grad, lr), None
        if state is None:
            state = self.init_state(params.size)
        return adamw_step(state, params, grad, lr)


GD = OptimizerChoice("gd")
ADAMW = OptimizerChoice("adamw")
