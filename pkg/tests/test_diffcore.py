import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ptec.diffcore import SourceObjective, as_params, finite_diff_grad, grad_check, relative_errors
from ptec.errors import ContractError, NumericalError
from ptec.objectives import Batch, QuadraticSource


class Perturbed(SourceObjective):
    """Wraps an objective and corrupts one analytic gradient component."""

    def __init__(self, inner, index, amount):
        self.inner, self.index, self.amount = inner, index, amount
        self.source_id = inner.source_id

    @property
    def dim(self):
        return self.inner.dim

    def loss_grad(self, params, batch):
        loss, grad = self.inner.loss_grad(params, batch)
        grad = grad.copy()
        grad[self.index] += self.amount
        return loss, grad

    def loss(self, params, batch):
        return self.inner.loss(params, batch)


class LogBarrier(SourceObjective):
    source_id = 0
    dim = 2

    def loss_grad(self, params, batch):
        with np.errstate(invalid="ignore", divide="ignore"):
            return float(params[0] ** 2 + np.log(params[1])), np.array([2 * params[0], 1 / params[1]])


class Empty(SourceObjective):
    source_id = 0
    dim = 0

    def loss_grad(self, params, batch):
        return 0.0, np.zeros(0)


@pytest.mark.parametrize("h", [1e-4, 1e-5, 1e-6])
def test_fd_identity_quadratic(h):
    q = QuadraticSource(np.eye(2), [0.0, 0.0])
    np.testing.assert_allclose(finite_diff_grad(q, [3.0, 4.0], h=h), [3.0, 4.0], rtol=1e-8)


def test_fd_zero_at_minimum():
    rng = np.random.default_rng(0)
    q = QuadraticSource.random(4, rng)
    np.testing.assert_allclose(finite_diff_grad(q, q.c), 0.0, atol=1e-10)


def test_fd_rejects_bad_step():
    q = QuadraticSource(np.eye(2), [0.0, 0.0])
    with pytest.raises(ContractError):
        finite_diff_grad(q, [1.0, 1.0], h=0.0)


def test_fd_nonfinite_names_component():
    with pytest.raises(NumericalError, match="component 1"):
        finite_diff_grad(LogBarrier(), [1.0, 1e-6], h=1e-5)


def test_fd_masked_richardson_and_analytic(masked_single):
    model, obj, params, batch = masked_single
    coarse = finite_diff_grad(obj, params, batch, h=1e-4)
    fine = finite_diff_grad(obj, params, batch, h=1e-5)
    scale = np.max(np.abs(fine))
    # O(h^2) truncation: the two step sizes agree far below the checked tolerance
    assert np.max(np.abs(coarse - fine)) / scale < 1e-6
    extrapolated = (100.0 * fine - coarse) / 99.0
    assert np.max(np.abs(extrapolated - fine)) / scale < 1e-7
    analytic = obj.grad(params, batch)
    assert np.max(np.abs(analytic - fine)) / scale < 1e-5


def test_grad_check_quadratic_passes():
    rng = np.random.default_rng(1)
    q = QuadraticSource.random(5, rng)
    rep = grad_check(q, rng.standard_normal(5), tol=1e-7)
    assert rep.passed and rep.max_rel_error < 1e-7 and rep.dim == 5


@pytest.mark.parametrize("index", [0, 2, 4])
def test_grad_check_catches_injected_fault(index):
    rng = np.random.default_rng(2)
    q = QuadraticSource.random(5, rng)
    rep = grad_check(Perturbed(q, index, 1e-2), rng.standard_normal(5), tol=1e-7)
    assert not rep.passed
    assert rep.worst_index == index


def test_grad_check_zero_dim():
    with pytest.raises(ContractError):
        grad_check(Empty(), [1.0])


def test_grad_check_dim_mismatch():
    class Wrong(Perturbed):
        def loss_grad(self, params, batch):
            loss, grad = self.inner.loss_grad(params, batch)
            return loss, np.append(grad, 0.0)

    q = QuadraticSource(np.eye(2), [0.0, 0.0])
    with pytest.raises(ContractError):
        grad_check(Wrong(q, 0, 0.0), [1.0, 2.0])


def test_grad_check_masked(masked_single):
    model, obj, params, batch = masked_single
    assert grad_check(obj, params, batch, tol=1e-5).passed


def test_fd_invariant_to_sample_order(masked_problem):
    model, sources, objectives = masked_problem
    obj = objectives[0]
    samples = sources[0].samples[:5]
    params = model.init_params(np.random.default_rng(4))
    a = finite_diff_grad(obj, params, Batch(0, samples, seed=5))
    b = finite_diff_grad(obj, params, Batch(0, samples[::-1], seed=5))
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_relative_errors_all_zero():
    assert np.all(relative_errors(np.zeros(3), np.zeros(3)) == 0)


def test_as_params_validation():
    with pytest.raises(ContractError):
        as_params([[1.0, 2.0]])
    with pytest.raises(ContractError):
        as_params([])
    with pytest.raises(NumericalError):
        as_params([1.0, np.nan])
    p = np.array([1.0, 2.0])
    q = as_params(p)
    q[0] = 5.0
    assert p[0] == 1.0


finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@given(arrays(np.float64, st.integers(1, 20), elements=finite))
def test_adding_zero_gradient_is_exact(p):
    g = np.full_like(p, 123.0)
    assert (p + g * 0.0).tobytes() == (p + 0.0).tobytes()
    np.testing.assert_array_equal(p + g * 0.0, p)
