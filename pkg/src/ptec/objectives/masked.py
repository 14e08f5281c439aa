"""Toy masked-prediction objective in the BEST-RQ style.

Spans of frames are replaced by Gaussian noise; a small per-frame MLP sees
a context window of the corrupted sequence and predicts, at masked frames
only, the codebook index a frozen random-projection quantizer assigns to
the *clean* frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffcore import SourceObjective, check_same_dim
from ..errors import ContractError
from .data import Batch, DataSource, Sample


@dataclass(frozen=True)
class MaskSpec:
    start_prob: float = 0.02
    span: int = 20
    noise_mean: float = 0.0
    noise_var: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.start_prob <= 1.0:
            raise ContractError(f"start_prob must be in [0, 1], got {self.start_prob}")
        if self.span < 1:
            raise ContractError(f"span must be >= 1, got {self.span}")
        if self.noise_var < 0:
            raise ContractError(f"noise_var must be >= 0, got {self.noise_var}")


def mask_positions(num_frames: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask: each frame opens a ``span``-long mask with ``start_prob``.

    Overlapping spans merge; spans running past the end are clipped.
    """
    starts = rng.random(num_frames) < spec.start_prob
    opened = np.concatenate(([0], np.cumsum(starts)))
    lo = np.maximum(np.arange(num_frames) + 1 - spec.span, 0)
    return opened[np.arange(num_frames) + 1] - opened[lo] > 0


def _corrupt(frames: np.ndarray, spec: MaskSpec, rng: np.random.Generator):
    idx = np.flatnonzero(mask_positions(frames.shape[0], spec, rng))
    if idx.size == 0:
        return frames, idx
    out = frames.copy()
    out[idx] = spec.noise_mean + np.sqrt(spec.noise_var) * rng.standard_normal(
        (idx.size, frames.shape[1]))
    return out, idx


def apply_masking(sample: Sample, spec: MaskSpec,
                  rng: np.random.Generator) -> tuple[Sample, np.ndarray]:
    """Return the corrupted sample and the sorted indices of replaced frames."""
    frames, idx = _corrupt(sample.frames, spec, rng)
    if idx.size == 0:
        return sample, idx
    return Sample(frames, uid=sample.uid), idx


class RandomQuantizer:
    """Frozen random projection followed by nearest-codeword lookup."""

    def __init__(self, projection, codebook):
        self.projection = np.array(projection, dtype=np.float64)
        self.codebook = np.array(codebook, dtype=np.float64)
        if self.projection.ndim != 2 or self.codebook.ndim != 2:
            raise ContractError("projection and codebook must be matrices")
        if self.projection.shape[1] != self.codebook.shape[1]:
            raise ContractError(
                f"projection maps to {self.projection.shape[1]} dims, "
                f"codebook rows have {self.codebook.shape[1]}")
        self.projection.setflags(write=False)
        self.codebook.setflags(write=False)

    @classmethod
    def random(cls, feature_dim: int, code_dim: int = 16, codebook_size: int = 256,
               seed: int = 0) -> "RandomQuantizer":
        rng = np.random.default_rng([seed, 0xC0DE])
        bound = np.sqrt(6.0 / (feature_dim + code_dim))
        projection = rng.uniform(-bound, bound, size=(feature_dim, code_dim))
        # codewords on the scale of a projected unit-variance frame
        codebook = rng.standard_normal((codebook_size, code_dim)) * bound * np.sqrt(feature_dim / 3.0)
        return cls(projection, codebook)

    @property
    def codebook_size(self) -> int:
        return self.codebook.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.projection.shape[0]


def quantize_frames(quantizer: RandomQuantizer, frames: np.ndarray) -> np.ndarray:
    """Nearest-codeword index per row of ``frames``; ties go to the lowest index.

    Distances come from the fast ``|p|^2 - 2 p.c + |c|^2`` expansion; rows
    whose best candidates are within rounding of each other are re-scored
    with exact squared differences so the tie rule is honored.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != quantizer.feature_dim:
        raise ContractError(
            f"frames have shape {frames.shape}, quantizer expects {quantizer.feature_dim} features")
    cb = quantizer.codebook
    proj = frames @ quantizer.projection
    dist = ((proj * proj).sum(axis=1)[:, None] - 2.0 * proj @ cb.T
            + (cb * cb).sum(axis=1)[None, :])
    labels = np.argmin(dist, axis=1)
    best = dist[np.arange(len(labels)), labels]
    slack = 1e-9 * (1.0 + np.abs(dist).max(axis=1))
    ambiguous = np.flatnonzero((dist <= (best + slack)[:, None]).sum(axis=1) > 1)
    for r in ambiguous:
        exact = ((proj[r][None, :] - cb) ** 2).sum(axis=1)
        labels[r] = int(np.argmin(exact))
    return labels


def quantize_targets(quantizer: RandomQuantizer, sample: Sample) -> np.ndarray:
    """Per-frame target labels of a sample; independent of any model parameters."""
    frames = sample.frames if isinstance(sample, Sample) else sample
    return quantize_frames(quantizer, frames)


class MaskedPredictionModel:
    """One-hidden-layer tanh perceptron over context windows of frames.

    Parameters live in one flat vector laid out as ``w_in (hidden, in_dim)``,
    ``b_in (hidden,)``, ``w_out (codes, hidden)``, ``b_out (codes,)``.
    """

    def __init__(self, quantizer: RandomQuantizer, hidden: int = 32, context: int = 1,
                 mask_spec: MaskSpec | None = None):
        if hidden < 1 or context < 0:
            raise ContractError("hidden must be >= 1 and context >= 0")
        self.quantizer = quantizer
        self.hidden = hidden
        self.context = context
        self.mask_spec = mask_spec if mask_spec is not None else MaskSpec()
        self.feature_dim = quantizer.feature_dim
        self.in_dim = (2 * context + 1) * self.feature_dim
        codes = quantizer.codebook_size
        shapes = [("w_in", (hidden, self.in_dim)), ("b_in", (hidden,)),
                  ("w_out", (codes, hidden)), ("b_out", (codes,))]
        self.layout = {}
        offset = 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            self.layout[name] = (slice(offset, offset + size), shape)
            offset += size
        self.dim = offset

    def unpack(self, params: np.ndarray) -> dict[str, np.ndarray]:
        return {name: params[sl].reshape(shape) for name, (sl, shape) in self.layout.items()}

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        params = np.zeros(self.dim)
        views = self.unpack(params)
        views["w_in"][...] = rng.standard_normal(views["w_in"].shape) / np.sqrt(self.in_dim)
        views["w_out"][...] = rng.standard_normal(views["w_out"].shape) / np.sqrt(self.hidden)
        return params

    def windows(self, frames: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Context windows centered on frames ``idx``, zero beyond the edges."""
        c = self.context
        T, D = frames.shape
        out = np.zeros((idx.size, 2 * c + 1, D))
        for k, off in enumerate(range(-c, c + 1)):
            pos = idx + off
            ok = (pos >= 0) & (pos < T)
            out[ok, k] = frames[pos[ok]]
        return out.reshape(idx.size, -1)

    def logits(self, params: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        w = self.unpack(params)
        return np.tanh(inputs @ w["w_in"].T + w["b_in"]) @ w["w_out"].T + w["b_out"]


@dataclass(frozen=True)
class MaskedInputs:
    inputs: np.ndarray
    labels: np.ndarray
    degenerate: bool


def build_masked_inputs(model: MaskedPredictionModel, batch: Batch, seed: int,
                        label_fn=None) -> MaskedInputs:
    """Mask every sample of ``batch`` and gather (window, target) pairs.

    Sample ``s`` is masked with the stream ``default_rng([seed, s.uid, attempt])``,
    so the result does not depend on sample order. When nothing is masked the
    whole batch is re-masked once (``attempt=1``) before being declared
    degenerate.
    """
    if label_fn is None:
        def label_fn(s):
            return quantize_targets(model.quantizer, s)
    for attempt in (0, 1):
        xs, ys = [], []
        for s in batch.samples:
            rng = np.random.default_rng([seed, s.uid, attempt])
            corrupted, idx = _corrupt(s.frames, model.mask_spec, rng)
            if idx.size:
                xs.append(model.windows(corrupted, idx))
                ys.append(label_fn(s)[idx])
        if xs:
            return MaskedInputs(np.concatenate(xs), np.concatenate(ys), False)
    return MaskedInputs(np.empty((0, model.in_dim)), np.empty(0, dtype=np.intp), True)


def cross_entropy_loss_grad(model: MaskedPredictionModel, params: np.ndarray,
                            data: MaskedInputs, need_grad: bool = True):
    n = data.labels.size
    if n == 0:
        return 0.0, (np.zeros(model.dim) if need_grad else None)
    w = model.unpack(params)
    hid = np.tanh(data.inputs @ w["w_in"].T + w["b_in"])
    z = hid @ w["w_out"].T + w["b_out"]
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, data.labels]))
    if not need_grad:
        return loss, None
    dz = np.exp(z - logsum[:, None])
    dz[rows, data.labels] -= 1.0
    dz /= n
    grad = np.empty(model.dim)
    g = model.unpack(grad)
    g["w_out"][...] = dz.T @ hid
    g["b_out"][...] = dz.sum(axis=0)
    da = (dz @ w["w_out"]) * (1.0 - hid * hid)
    g["w_in"][...] = da.T @ data.inputs
    g["b_in"][...] = da.sum(axis=0)
    return loss, grad


def masked_prediction_loss_grad(model: MaskedPredictionModel, params, batch: Batch,
                                seed: int | None = None) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over masked frames and its gradient.

    ``seed`` defaults to ``batch.seed``. Degenerate batches (nothing masked
    after one re-draw) give zero loss and zero gradient.
    """
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (model.dim,):
        raise ContractError(f"params have shape {params.shape}, model expects ({model.dim},)")
    data = build_masked_inputs(model, batch, batch.seed if seed is None else seed)
    return cross_entropy_loss_grad(model, params, data)


class MaskedPredictionObjective(SourceObjective):
    """Binds a model to one data source; clean-frame targets are precomputed."""

    def __init__(self, model: MaskedPredictionModel, source: DataSource):
        self.model = model
        self.source_id = source.source_id
        pool = list(source.samples) + list(source.heldout)
        labels = quantize_frames(model.quantizer, np.concatenate([s.frames for s in pool]))
        bounds = np.cumsum([0] + [s.num_frames for s in pool])
        self._labels = {id(s): (s, labels[bounds[i]:bounds[i + 1]]) for i, s in enumerate(pool)}

    @property
    def dim(self) -> int:
        return self.model.dim

    def _label(self, sample: Sample) -> np.ndarray:
        hit = self._labels.get(id(sample))
        if hit is not None and hit[0] is sample:
            return hit[1]
        return quantize_targets(self.model.quantizer, sample)

    def prepare(self, batch) -> MaskedInputs:
        if isinstance(batch, MaskedInputs):
            return batch
        if batch.source_id != self.source_id:
            raise ContractError(
                f"batch from source {batch.source_id} given to objective {self.source_id}")
        return build_masked_inputs(self.model, batch, batch.seed, self._label)

    def _params(self, params) -> np.ndarray:
        params = np.asarray(params, dtype=np.float64)
        check_same_dim(params, np.empty(self.dim), "params/model")
        return params

    def loss_grad(self, params, batch):
        return cross_entropy_loss_grad(self.model, self._params(params), self.prepare(batch))

    def loss(self, params, batch):
        return cross_entropy_loss_grad(self.model, self._params(params), self.prepare(batch),
                                       need_grad=False)[0]

    def degenerate(self, batch) -> bool:
        return self.prepare(batch).degenerate

    def evaluate(self, params, batch):
        data = self.prepare(batch)
        loss, grad = cross_entropy_loss_grad(self.model, self._params(params), data)
        return loss, grad, data.degenerate

    def initial_params(self, rng):
        return self.model.init_params(rng)
