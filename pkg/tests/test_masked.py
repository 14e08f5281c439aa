import numpy as np
import pytest

from ptec.errors import ContractError
from ptec.objectives import (Batch, MaskedPredictionModel, MaskSpec, RandomQuantizer, Sample,
                             apply_masking, masked_prediction_loss_grad, quantize_targets)
from ptec.objectives.masked import build_masked_inputs, mask_positions, quantize_frames


def test_mask_spec_validation():
    with pytest.raises(ContractError):
        MaskSpec(start_prob=1.5)
    with pytest.raises(ContractError):
        MaskSpec(span=0)


def test_masking_disabled():
    sample = Sample(np.random.default_rng(0).standard_normal((50, 3)), uid=1)
    out, idx = apply_masking(sample, MaskSpec(start_prob=0.0), np.random.default_rng(1))
    assert idx.size == 0
    np.testing.assert_array_equal(out.frames, sample.frames)


def test_masking_everything():
    sample = Sample(np.random.default_rng(0).standard_normal((50, 3)), uid=1)
    out, idx = apply_masking(sample, MaskSpec(start_prob=1.0, span=3), np.random.default_rng(1))
    np.testing.assert_array_equal(idx, np.arange(50))
    assert not np.any(out.frames == sample.frames)


def test_masking_replaces_exactly_the_index_set():
    rng = np.random.default_rng(2)
    sample = Sample(rng.standard_normal((200, 4)), uid=0)
    out, idx = apply_masking(sample, MaskSpec(start_prob=0.05, span=5), np.random.default_rng(3))
    changed = np.flatnonzero(np.any(out.frames != sample.frames, axis=1))
    np.testing.assert_array_equal(changed, idx)


def test_masking_deterministic():
    sample = Sample(np.random.default_rng(0).standard_normal((100, 2)))
    spec = MaskSpec(start_prob=0.1, span=4)
    a = apply_masking(sample, spec, np.random.default_rng(9))
    b = apply_masking(sample, spec, np.random.default_rng(9))
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(a[0].frames, b[0].frames)


def test_mask_positions_match_span_definition():
    rng = np.random.default_rng(4)
    spec = MaskSpec(start_prob=0.07, span=6)
    for seed in range(50):
        starts = np.random.default_rng(seed).random(120) < spec.start_prob
        expected = np.zeros(120, bool)
        for s in np.flatnonzero(starts):
            expected[s:s + spec.span] = True
        np.testing.assert_array_equal(mask_positions(120, spec, np.random.default_rng(seed)),
                                      expected)
    assert rng is not None


def test_masked_fraction_monte_carlo():
    spec = MaskSpec(start_prob=0.02, span=20)
    T, draws = 1000, 100_000
    rng = np.random.default_rng(123)
    total = 0
    for _ in range(draws // 1000):
        starts = rng.random((1000, T)) < spec.start_prob
        c = np.concatenate([np.zeros((1000, 1), int), np.cumsum(starts, axis=1)], axis=1)
        lo = np.maximum(np.arange(T) + 1 - spec.span, 0)
        total += int((c[:, 1:] - c[:, lo] > 0).sum())
    fraction = total / (draws * T)
    windows = np.minimum(np.arange(T) + 1, spec.span)
    analytic = np.mean(1.0 - (1.0 - spec.start_prob) ** windows)
    assert abs(fraction - 0.332) <= 0.01
    assert abs(fraction - analytic) <= 5e-4
    # the helper used above is the same rule the library applies
    ours = np.mean([mask_positions(T, spec, np.random.default_rng(s)).mean() for s in range(2000)])
    assert abs(ours - analytic) <= 0.01


def test_quantizer_exact_hit():
    rng = np.random.default_rng(0)
    qz = RandomQuantizer.random(5, 4, 32, seed=1)
    frame = rng.standard_normal((1, 5))
    codebook = np.array(qz.codebook)
    codebook[17] = frame @ qz.projection
    qz2 = RandomQuantizer(qz.projection, codebook)
    assert quantize_frames(qz2, frame)[0] == 17


def test_quantizer_tie_lowest_index():
    proj = np.eye(2)
    codebook = np.array([[5.0, 5.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    qz = RandomQuantizer(proj, codebook)
    assert quantize_frames(qz, np.zeros((1, 2)))[0] == 1
    codebook = np.array([[5.0, 5.0], [0.3, 0.1], [0.1, -0.3]])
    assert quantize_frames(RandomQuantizer(proj, codebook), np.zeros((1, 2)))[0] == 1


def test_quantizer_matches_brute_force():
    rng = np.random.default_rng(1)
    qz = RandomQuantizer.random(8, 16, 256, seed=2)
    frames = rng.standard_normal((500, 8))
    proj = frames @ qz.projection
    brute = np.array([int(np.argmin([np.sum((p - row) ** 2) for row in qz.codebook]))
                      for p in proj])
    np.testing.assert_array_equal(quantize_frames(qz, frames), brute)


def test_quantizer_permutation_equivariant():
    rng = np.random.default_rng(3)
    qz = RandomQuantizer.random(6, 8, 64, seed=0)
    frames = rng.standard_normal((100, 6))
    perm = rng.permutation(100)
    labels = quantize_targets(qz, Sample(frames))
    np.testing.assert_array_equal(quantize_targets(qz, Sample(frames[perm])), labels[perm])


def test_quantizer_is_frozen():
    qz = RandomQuantizer.random(4, 4, 8)
    with pytest.raises(ValueError):
        qz.codebook[0, 0] = 1.0
    with pytest.raises(ValueError):
        qz.projection[0, 0] = 1.0


def test_targets_ignore_model_params(masked_problem):
    model, sources, objectives = masked_problem
    sample = sources[0].samples[0]
    before = quantize_targets(model.quantizer, sample)
    model.init_params(np.random.default_rng(0))
    np.testing.assert_array_equal(quantize_targets(model.quantizer, sample), before)


def test_zero_params_uniform_loss():
    qz = RandomQuantizer.random(8, 16, 256, seed=0)
    model = MaskedPredictionModel(qz, hidden=16)
    rng = np.random.default_rng(0)
    batch = Batch(0, [Sample(rng.standard_normal((64, 8)), uid=u) for u in range(4)], seed=1)
    loss, grad = masked_prediction_loss_grad(model, np.zeros(model.dim), batch)
    assert abs(loss - np.log(256)) <= 1e-9
    assert np.all(np.isfinite(grad))


def test_layout_is_bijection(masked_problem):
    model = masked_problem[0]
    covered = np.zeros(model.dim, int)
    for sl, shape in model.layout.values():
        assert sl.stop - sl.start == int(np.prod(shape))
        covered[sl] += 1
    assert np.all(covered == 1)
    params = np.arange(model.dim, dtype=float)
    views = model.unpack(params)
    flat = np.concatenate([views[k].ravel() for k in model.layout])
    np.testing.assert_array_equal(np.sort(flat), params)


def test_duplicated_batch_same_loss(masked_problem):
    model, sources, objectives = masked_problem
    params = model.init_params(np.random.default_rng(1))
    samples = sources[0].samples[:6]
    single = Batch(0, samples, seed=4)
    double = Batch(0, list(samples) + list(samples), seed=4)
    la, ga = masked_prediction_loss_grad(model, params, single)
    lb, gb = masked_prediction_loss_grad(model, params, double)
    assert abs(la - lb) <= 1e-12
    np.testing.assert_allclose(ga, gb, rtol=0, atol=1e-12)


def test_loss_deterministic(masked_problem):
    model, sources, objectives = masked_problem
    params = model.init_params(np.random.default_rng(2))
    batch = Batch(0, sources[0].samples[:5], seed=8)
    a = masked_prediction_loss_grad(model, params, batch)
    b = masked_prediction_loss_grad(model, params, batch)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])
    c = masked_prediction_loss_grad(model, params, batch, seed=9)
    assert c[0] != a[0]


def test_objective_matches_free_function(masked_problem):
    model, sources, objectives = masked_problem
    params = model.init_params(np.random.default_rng(3))
    batch = Batch(1, sources[1].samples[:5], seed=2)
    la, ga = objectives[1].loss_grad(params, batch)
    lb, gb = masked_prediction_loss_grad(model, params, batch)
    assert la == lb and np.array_equal(ga, gb)
    assert objectives[1].loss(params, batch) == la


def test_objective_rejects_foreign_batch(masked_problem):
    model, sources, objectives = masked_problem
    with pytest.raises(ContractError):
        objectives[0].loss(np.zeros(model.dim), Batch(1, sources[1].samples[:2]))


def test_loss_nonnegative_and_grad_finite(masked_problem):
    model, sources, objectives = masked_problem
    rng = np.random.default_rng(5)
    for k in range(10):
        params = 3.0 * rng.standard_normal(model.dim)
        loss, grad = objectives[0].loss_grad(params, Batch(0, sources[0].samples[k:k + 3], seed=k))
        assert loss >= 0 and np.all(np.isfinite(grad))


def test_degenerate_batch_zero_loss():
    qz = RandomQuantizer.random(3, 4, 8)
    model = MaskedPredictionModel(qz, hidden=4, mask_spec=MaskSpec(start_prob=0.0))
    batch = Batch(0, [Sample(np.ones((10, 3)))])
    data = build_masked_inputs(model, batch, 0)
    assert data.degenerate and data.labels.size == 0
    loss, grad = masked_prediction_loss_grad(model, model.init_params(np.random.default_rng(0)), batch)
    assert loss == 0.0 and not np.any(grad)


def test_degenerate_batch_retries_once():
    qz = RandomQuantizer.random(3, 4, 8)
    spec = MaskSpec(start_prob=0.2, span=1)
    model = MaskedPredictionModel(qz, hidden=4, mask_spec=spec)
    sample = Sample(np.ones((2, 3)), uid=0)
    # find a seed whose first attempt masks nothing but whose retry masks something
    for seed in range(500):
        first = mask_positions(2, spec, np.random.default_rng([seed, 0, 0]))
        second = mask_positions(2, spec, np.random.default_rng([seed, 0, 1]))
        if not first.any() and second.any():
            data = build_masked_inputs(model, Batch(0, [sample], seed=seed), seed)
            assert not data.degenerate
            assert data.labels.size == second.sum()
            return
    pytest.fail("no retry seed found")


def test_windows_zero_padding():
    qz = RandomQuantizer.random(2, 2, 4)
    model = MaskedPredictionModel(qz, hidden=2, context=1)
    frames = np.arange(10, dtype=float).reshape(5, 2) + 1
    w = model.windows(frames, np.array([0, 2, 4]))
    np.testing.assert_array_equal(w[0], [0, 0, 1, 2, 3, 4])
    np.testing.assert_array_equal(w[1], [3, 4, 5, 6, 7, 8])
    np.testing.assert_array_equal(w[2], [7, 8, 9, 10, 0, 0])
