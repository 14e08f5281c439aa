"""Quadratic lower-level objective with closed-form trajectories and hypergradients."""

from __future__ import annotations

import numpy as np

from ..diffcore import SourceObjective, as_params, check_same_dim
from ..errors import ContractError


class QuadraticSource(SourceObjective):
    """``g(phi) = 1/2 (phi - c)^T A (phi - c)`` with symmetric positive-definite ``A``.

    The loss ignores its batch argument: this is a full-batch fixture.
    """

    def __init__(self, A, c, source_id: int = 0):
        A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        c = as_params(np.atleast_1d(c))
        if A.shape != (c.size, c.size):
            raise ContractError(f"A has shape {A.shape}, expected {(c.size, c.size)}")
        if not np.allclose(A, A.T, rtol=0.0, atol=1e-12):
            raise ContractError("A must be symmetric")
        try:
            np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            raise ContractError("A must be positive definite") from None
        self.A = A
        self.c = c
        self.source_id = source_id
        self.A.setflags(write=False)
        self.c.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.c.size

    @classmethod
    def scalar(cls, a: float, c: float, source_id: int = 0) -> "QuadraticSource":
        return cls([[a]], [c], source_id)

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, source_id: int = 0,
               eig_range=(0.5, 4.0)) -> "QuadraticSource":
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        eigs = rng.uniform(*eig_range, size=dim)
        A = (q * eigs) @ q.T
        A = 0.5 * (A + A.T)
        return cls(A, rng.standard_normal(dim), source_id)

    @property
    def max_eig(self) -> float:
        return float(np.linalg.eigvalsh(self.A)[-1])

    def loss_grad(self, params, batch=None):
        return quadratic_loss_grad(self, params)

    def loss(self, params, batch=None):
        r = np.asarray(params, dtype=np.float64) - self.c
        return 0.5 * float(r @ self.A @ r)


def _residual(q: QuadraticSource, phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    check_same_dim(phi, q.c, "parameter/center")
    return phi - q.c


def quadratic_loss_grad(q: QuadraticSource, phi) -> tuple[float, np.ndarray]:
    r = _residual(q, phi)
    g = q.A @ r
    return 0.5 * float(r @ g), g


def _step_matrix(q: QuadraticSource, alpha: float) -> np.ndarray:
    return np.eye(q.dim) - alpha * q.A


def quadratic_trajectory(q: QuadraticSource, theta, alpha: float, K: int) -> np.ndarray:
    """Exact K-step gradient-descent iterate ``c + (I - alpha A)^K (theta - c)``."""
    if K < 0 or alpha < 0:
        raise ContractError(f"need K >= 0 and alpha >= 0, got K={K}, alpha={alpha}")
    r = _residual(q, theta)
    return q.c + np.linalg.matrix_power(_step_matrix(q, alpha), K) @ r


def exact_hypergradient_quadratic(q: QuadraticSource, theta, alpha: float, K: int) -> np.ndarray:
    """Gradient of ``theta -> g(phi_K(theta))`` keeping the unrolled Jacobians.

    Equals ``(I - alpha A)^K A (I - alpha A)^K (theta - c)``, evaluated in
    the eigenbasis of ``A`` (all factors commute), independently of the
    matrix-power path used for the first-order form.
    """
    if K < 1:
        raise ContractError(f"K must be >= 1, got {K}")
    r = _residual(q, theta)
    lam, V = np.linalg.eigh(q.A)
    return V @ (lam * (1.0 - alpha * lam) ** (2 * K) * (V.T @ r))


def first_order_hypergradient_quadratic(q: QuadraticSource, theta, alpha: float, K: int) -> np.ndarray:
    """Hypergradient with the inner Hessians dropped: ``grad g(phi_K)``."""
    if K < 1:
        raise ContractError(f"K must be >= 1, got {K}")
    r = _residual(q, theta)
    J = np.linalg.matrix_power(_step_matrix(q, alpha), K)
    return q.A @ (J @ r)
