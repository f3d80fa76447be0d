"""Dense Gaussian algebra for small state dimensions.

Every filter and smoother step in the package is assembled from the
functions here: marginalizing through a linear-Gaussian map, conditioning
on a linear-Gaussian measurement, and evaluating log densities.
Covariances are symmetrized after every update and all inversions go
through a Cholesky factorization with a fixed jitter ladder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "JITTER_LADDER",
    "EmissionModel",
    "Gaussian",
    "NumericalError",
    "cho_solve",
    "cholesky_lower",
    "condition",
    "condition_information",
    "log_density",
    "marginalize_linear",
    "symmetrize",
    "taylor_matrix_exp",
]

JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8)


class NumericalError(ArithmeticError):
    """Raised when a matrix that must be positive definite is not."""


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def cholesky_lower(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a (batch of) symmetric matrices.

    Jitter is added to the diagonal in the steps of ``JITTER_LADDER`` until
    the factorization succeeds. For stacked input the whole stack shares
    the smallest jitter that works for every member.

    Raises:
        NumericalError: if even the largest jitter fails or ``a`` is not finite.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("non-finite entries in matrix passed to cholesky_lower")
    eye = np.eye(a.shape[-1])
    for jitter in JITTER_LADDER:
        try:
            return np.linalg.cholesky(a + jitter * eye if jitter else a)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(f"matrix not positive definite after jitter {JITTER_LADDER[-1]:g}")


def cho_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a x = b`` for symmetric positive definite ``a`` (batched)."""
    chol = cholesky_lower(a)
    z = np.linalg.solve(chol, b)
    return np.linalg.solve(np.swapaxes(chol, -1, -2), z)


@dataclass(frozen=True)
class Gaussian:
    """Multivariate normal belief ``N(mean, cov)``."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class EmissionModel:
    """Linear-Gaussian measurement ``y = H x + r`` with ``r ~ N(0, R)``."""

    H: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        m, n = H.shape
        if R.shape != (m, m):
            raise ValueError(f"R must be {m}x{m}, got {R.shape}")
        if m > n:
            raise ValueError(f"measurement dim {m} exceeds state dim {n}")
        if not np.allclose(R, R.T, atol=1e-12):
            raise ValueError("R must be symmetric")
        cholesky_lower(R)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "R", R)

    @property
    def state_dim(self) -> int:
        return self.H.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.H.shape[0]


def marginalize_linear(prior: Gaussian, F, e, Q) -> Gaussian:
    """Push ``prior`` through ``x' = F x + e + w`` with ``w ~ N(0, Q)``."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    e = np.asarray(e, dtype=float).reshape(-1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n_out = F.shape[0]
    if F.shape[1] != prior.dim or e.size != n_out or Q.shape != (n_out, n_out):
        raise ValueError(
            f"dimension mismatch: F {F.shape}, e {e.shape}, Q {Q.shape}, prior dim {prior.dim}"
        )
    cov = symmetrize(F @ prior.cov @ F.T + Q)
    cholesky_lower(cov)
    return Gaussian(F @ prior.mean + e, cov)


def condition(prior: Gaussian, em: EmissionModel, y) -> tuple[Gaussian, np.ndarray]:
    """Bayes update of ``prior`` on measurement ``y``.

    Returns the posterior together with the Kalman gain
    ``K = P H^T (H P H^T + R)^{-1}``. The only inverse taken is of the
    innovation covariance, at measurement dimension.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    H, R = em.H, em.R
    if H.shape[1] != prior.dim or y.size != H.shape[0]:
        raise ValueError(f"dimension mismatch: H {H.shape}, y {y.shape}, prior dim {prior.dim}")
    P = prior.cov
    innovation_cov = symmetrize(H @ P @ H.T + R)
    gain = cho_solve(innovation_cov, H @ P).T
    mean = prior.mean + gain @ (y - H @ prior.mean)
    cov = symmetrize(P - gain @ H @ P)
    return Gaussian(mean, cov), gain


def condition_information(prior: Gaussian, em: EmissionModel, y) -> Gaussian:
    """Information-form posterior; an independent check on :func:`condition`.

    ``Sigma = (P^-1 + H^T R^-1 H)^-1`` and
    ``mean = Sigma (H^T R^-1 y + P^-1 mu)``.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    H, R = em.H, em.R
    try:
        P_inv = np.linalg.inv(prior.cov)
        R_inv = np.linalg.inv(R)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular prior or measurement covariance") from exc
    sigma = np.linalg.inv(P_inv + H.T @ R_inv @ H)
    mean = sigma @ (H.T @ R_inv @ y + P_inv @ prior.mean)
    return Gaussian(mean, symmetrize(sigma))


def log_density(g: Gaussian, point) -> float:
    point = np.asarray(point, dtype=float).reshape(-1)
    chol = cholesky_lower(g.cov)
    z = np.linalg.solve(chol, point - g.mean)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (z @ z + logdet + g.dim * math.log(2.0 * math.pi))


def taylor_matrix_exp(a, dt: float, order: int) -> np.ndarray:
    """Truncated series ``sum_{n<=order} (dt a)^n / n!`` for ``exp(dt a)``."""
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {a.shape}")
    if order < 0:
        raise ValueError("order must be non-negative")
    eye = np.broadcast_to(np.eye(a.shape[-1]), a.shape)
    term = eye.copy()
    total = eye.copy()
    for n in range(1, order + 1):
        term = term @ (dt * a) / n
        total = total + term
    return total
