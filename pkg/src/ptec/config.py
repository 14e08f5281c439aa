"""JSON experiment configuration: schema, preset merging, dotted overrides, digest."""

from __future__ import annotations

import copy
import json
import math
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .checkpoint import config_digest
from .errors import ConfigError
from .optim import LrSchedule, OptimizerChoice
from .trainer import CsslConfig, PtecConfig

PRESETS = {
    # schedule shapes only; K, T and the PTEC learning rates stay explicit
    "paper-v-a": {
        "cssl": {"lr": {"initial_lr": 2e-4, "warm_epochs": 60,
                        "anneal_factor": 1 / math.sqrt(2), "total_epochs": 80},
                 "epochs": 80},
        "ptec": {"alpha": {"warm_epochs": 40, "anneal_factor": 1 / math.sqrt(2),
                           "total_epochs": 60},
                 "beta": {"warm_epochs": 40, "anneal_factor": 1 / math.sqrt(2),
                          "total_epochs": 60}},
    },
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ScheduleCfg(_Strict):
    initial_lr: float = Field(ge=0)
    warm_epochs: int = Field(ge=0)
    anneal_factor: float = Field(gt=0, le=1)
    total_epochs: int = Field(ge=1)

    def build(self) -> LrSchedule:
        return LrSchedule(self.initial_lr, self.warm_epochs, self.anneal_factor, self.total_epochs)


class OptimizerCfg(_Strict):
    kind: Literal["gd", "adamw"] = "gd"
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.01, ge=0)

    def build(self) -> OptimizerChoice:
        return OptimizerChoice(self.kind, self.beta1, self.beta2, self.eps, self.weight_decay)


class QuadSourceCfg(_Strict):
    A: Union[float, list[list[float]]]
    c: Union[float, list[float]]


class QuadraticCfg(_Strict):
    sources: list[QuadSourceCfg] = Field(min_length=1)
    init: Optional[list[float]] = None


class ShiftCfg(_Strict):
    mean: list[float]
    scale: list[float]
    rho: float = Field(0.0, ge=-1, lt=1)


class DataCfg(_Strict):
    num_sources: int = Field(ge=1)
    samples_per_source: Union[int, list[int]]
    frames: int = Field(ge=1)
    feature_dim: int = Field(ge=1)
    heldout_fraction: float = Field(0.2, ge=0, lt=1)
    mean_spread: float = Field(1.0, ge=0)
    rho: float = Field(0.8, ge=-1, lt=1)
    shifts: Optional[list[ShiftCfg]] = None
    names: Optional[list[str]] = None

    @model_validator(mode="after")
    def _check_lengths(self):
        counts = self.counts
        if len(counts) != self.num_sources or min(counts) < 1:
            raise ValueError("samples_per_source must give a positive count per source")
        if self.shifts is not None and len(self.shifts) != self.num_sources:
            raise ValueError("shifts must list one entry per source")
        if self.names is not None and len(self.names) != self.num_sources:
            raise ValueError("names must list one entry per source")
        return self

    @property
    def counts(self) -> list[int]:
        if isinstance(self.samples_per_source, int):
            return [self.samples_per_source] * self.num_sources
        return list(self.samples_per_source)


class MaskCfg(_Strict):
    start_prob: float = Field(0.02, ge=0, le=1)
    span: int = Field(20, ge=1)
    noise_mean: float = 0.0
    noise_var: float = Field(0.1, ge=0)


class MaskedCfg(_Strict):
    hidden: int = Field(32, ge=1)
    context: int = Field(1, ge=0)
    codebook_size: int = Field(256, ge=2)
    code_dim: int = Field(16, ge=1)
    mask: MaskCfg = MaskCfg()


class CsslCfg(_Strict):
    lr: ScheduleCfg
    epochs: int = Field(ge=1)
    batches_per_epoch: int = Field(1, ge=1)
    optimizer: OptimizerCfg = OptimizerCfg()


class PtecCfg(_Strict):
    T: int = Field(ge=1)
    K: int = Field(ge=1)
    alpha: ScheduleCfg
    beta: ScheduleCfg
    batches_per_epoch: int = Field(1, ge=1)
    inner_optimizer: OptimizerCfg = OptimizerCfg()
    outer_optimizer: OptimizerCfg = OptimizerCfg()
    resample_inner_batch: bool = False
    synchronous: bool = True


class AdaptCfg(_Strict):
    steps: int = Field(ge=0)
    lr: float = Field(ge=0)


class GradcheckCfg(_Strict):
    probes: int = Field(100, ge=1)
    h: float = Field(1e-5, gt=0)
    tol: Optional[float] = Field(None, gt=0)
    batch_size: int = Field(2, ge=1)


class ExperimentConfig(_Strict):
    model: Literal["quadratic", "masked-prediction"]
    seed: int = 0
    output_dir: str
    preset: Optional[Literal["paper-v-a"]] = None
    quadratic: Optional[QuadraticCfg] = None
    data: Optional[DataCfg] = None
    masked: Optional[MaskedCfg] = None
    cssl: Optional[CsslCfg] = None
    ptec: Optional[PtecCfg] = None
    adapt: Optional[AdaptCfg] = None
    gradcheck: GradcheckCfg = GradcheckCfg()
    workers: Optional[int] = Field(None, ge=1)
    persist_optimizer_state: bool = False
    epoch_checkpoints: bool = False

    @model_validator(mode="after")
    def _check_model_sections(self):
        if self.model == "quadratic":
            if self.quadratic is None:
                raise ValueError("model 'quadratic' needs a 'quadratic' section")
            if self.data is not None or self.masked is not None:
                raise ValueError("'data'/'masked' sections only apply to masked-prediction")
        else:
            if self.data is None:
                raise ValueError("model 'masked-prediction' needs a 'data' section")
            if self.quadratic is not None:
                raise ValueError("'quadratic' section only applies to model 'quadratic'")
        if self.ptec is not None:
            self.ptec_config().validate()
        if self.cssl is not None:
            self.cssl_config().validate()
        return self

    @property
    def num_sources(self) -> int:
        return len(self.quadratic.sources) if self.quadratic else self.data.num_sources

    def cssl_config(self) -> CsslConfig:
        if self.cssl is None:
            raise ConfigError("config has no 'cssl' section")
        c = self.cssl
        return CsslConfig(c.lr.build(), c.epochs, c.batches_per_epoch, c.optimizer.build(),
                          self.seed)

    def ptec_config(self) -> PtecConfig:
        if self.ptec is None:
            raise ConfigError("config has no 'ptec' section")
        p = self.ptec
        return PtecConfig(p.T, p.K, p.alpha.build(), p.beta.build(), p.batches_per_epoch,
                          p.inner_optimizer.build(), p.outer_optimizer.build(),
                          p.resample_inner_batch, p.synchronous, self.seed)


def _merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``"ptec.K=3"`` -> ``(["ptec", "K"], 3)``; values are JSON, else strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key.path=value")
    key, raw = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(raw: dict, overrides) -> dict:
    out = copy.deepcopy(raw)
    for text in overrides:
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-object")
        node[path[-1]] = value
    return out


class ResolvedConfig:
    """A validated config plus the provenance that feeds its digest.

    The output directory is left out of the digest: where a run writes does
    not change what it computes.
    """

    def __init__(self, config: ExperimentConfig, overrides: list[str]):
        self.config = config
        self.overrides = list(overrides)
        self.payload = {"config": config.model_dump(mode="json", exclude={"output_dir"}),
                        "overrides": self.overrides}
        self.digest = config_digest(self.payload)


def load_config(path, overrides=(), output_dir: str | None = None) -> ResolvedConfig:
    """Read, merge preset, apply overrides, validate. Raises ConfigError."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    overrides = list(overrides)
    raw = apply_overrides(raw, overrides)
    if output_dir is not None:
        raw["output_dir"] = output_dir
    preset = raw.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        for section, defaults in PRESETS[preset].items():
            if isinstance(raw.get(section), dict):
                raw[section] = _merge(defaults, raw[section])
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}:\n{exc}") from None
    return ResolvedConfig(cfg, overrides)
