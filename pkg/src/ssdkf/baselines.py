"""Classical reference estimators.

These are written directly against numpy, independent of the learned
engine, so they can double as test oracles for it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .gaussian import EmissionModel, Gaussian, NumericalError
from .neural import ExpertPrior
from .recursive import FilterOutput
from .smoothers import SmootherOutput
from .training import Adam

__all__ = [
    "BiasVariance",
    "bias_variance_diagnostic",
    "default_init",
    "extended_kalman_filter",
    "extended_kalman_smoother",
    "fit_Q_supervised",
    "kalman_filter_classic",
    "rts_smoother_classic",
]


def default_init(n: int) -> Gaussian:
    """Diffuse start ``N(0, 10 I)``."""
    return Gaussian(np.zeros(n), 10.0 * np.eye(n))


def _obs(y_seq) -> np.ndarray:
    y = np.asarray(getattr(y_seq, "y", y_seq), dtype=float)
    if y.ndim != 2:
        raise ValueError(f"expected a (K+1, M) observation array, got shape {y.shape}")
    return y


def _kalman(y, transition, em: EmissionModel, init: Gaussian, Q) -> FilterOutput:
    """Shared forward pass; ``transition(x_post)`` returns the matrix for the next step."""
    T, m = y.shape
    n = init.dim
    H, R = em.H, em.R
    out = {
        name: np.zeros(shape)
        for name, shape in (
            ("prior_mean", (T, n)),
            ("prior_cov", (T, n, n)),
            ("post_mean", (T, n)),
            ("post_cov", (T, n, n)),
            ("F", (T, n, n)),
        )
    }
    terms = np.zeros(T)
    x, P = init.mean.astype(float), init.cov.astype(float)
    eye = np.eye(n)
    for k in range(T):
        if k > 0:
            F = transition(x)
            x = F @ x
            P = F @ P @ F.T + Q
            P = 0.5 * (P + P.T)
            out["F"][k] = F
        else:
            out["F"][k] = eye
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"state estimate diverged at step {k}")
        out["prior_mean"][k], out["prior_cov"][k] = x, P
        S = H @ P @ H.T + R
        r = y[k] - H @ x
        try:
            c = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise NumericalError(f"innovation covariance singular at step {k}") from None
        w = np.linalg.solve(c, r)
        terms[k] = w @ w + 2.0 * np.log(np.diag(c)).sum()
        gain = np.linalg.solve(S, H @ P).T
        x = x + gain @ r
        P = (eye - gain @ H) @ P
        P = 0.5 * (P + P.T)
        out["post_mean"][k], out["post_cov"][k] = x, P
    e = np.zeros((T, n))
    Qs = np.broadcast_to(Q, (T, n, n)).copy()
    return FilterOutput(e=e, Q=Qs, loss_terms=terms, H=H, R=R, **out)


def kalman_filter_classic(y_seq, F, Q, em: EmissionModel, init: Gaussian | None = None) -> FilterOutput:
    """Kalman filter with known constant ``(F, Q)``; the first prior is ``init``.

    ``predictive_nll`` from :mod:`ssdkf.recursive` applies to the result.
    """
    F = np.asarray(F, dtype=float)
    Q = np.asarray(Q, dtype=float)
    init = default_init(F.shape[0]) if init is None else init
    return _kalman(_obs(y_seq), lambda _x: F, em, init, Q)


def rts_smoother_classic(filter_out: FilterOutput, F, Q) -> SmootherOutput:
    """Textbook RTS pass with constant ``(F, Q)``; predictions are recomputed from the posteriors."""
    F = np.asarray(F, dtype=float)
    Q = np.asarray(Q, dtype=float)
    xf, Pf = filter_out.post_mean, filter_out.post_cov
    T, n = xf.shape
    z, G = xf.copy(), Pf.copy()
    gains = np.zeros((max(T - 1, 0), n, n))
    for k in range(T - 2, -1, -1):
        x_pred = F @ xf[k]
        P_pred = F @ Pf[k] @ F.T + Q
        try:
            J = Pf[k] @ F.T @ np.linalg.inv(P_pred)
        except np.linalg.LinAlgError:
            raise NumericalError(f"predicted covariance singular at step {k + 1}") from None
        gains[k] = J
        z[k] = xf[k] + J @ (z[k + 1] - x_pred)
        G[k] = Pf[k] + J @ (G[k + 1] - P_pred) @ J.T
        G[k] = 0.5 * (G[k] + G[k].T)
    return SmootherOutput(mean=z, cov=G, gains=gains)


def _linearized(prior: ExpertPrior):
    if prior.mode == "none":
        raise ValueError("extended smoothing needs a fixed or state-dependent prior")
    return lambda x: np.asarray(prior.base(x[:, None]), dtype=float)


def extended_kalman_filter(y_seq, prior: ExpertPrior, em: EmissionModel, Q, init: Gaussian | None = None) -> FilterOutput:
    """EKF where step ``k`` uses the prior's transition at the previous posterior mean."""
    Q = np.asarray(Q, dtype=float)
    init = default_init(Q.shape[0]) if init is None else init
    return _kalman(_obs(y_seq), _linearized(prior), em, init, Q)


def extended_kalman_smoother(y_seq, prior: ExpertPrior, em: EmissionModel, Q, init: Gaussian | None = None) -> SmootherOutput:
    """EKF forward, then an RTS pass reusing the stored linearizations."""
    from .smoothers import linearized_smooth

    return linearized_smooth(extended_kalman_filter(y_seq, prior, em, Q, init))


# supervised covariance fit


def _q_from_raw(raw, n: int):
    rows, cols = np.tril_indices(n, -1)
    diag = ad.add(ad.softplus(ad.slice_(raw, (slice(0, n),))), 1e-9)
    d_map = np.zeros((n, n * n))
    d_map[np.arange(n), np.arange(n) * (n + 1)] = 1.0
    flat = ad.matmul(ad.reshape(diag, (1, n)), d_map)
    if n > 1:
        o_map = np.zeros((rows.size, n * n))
        o_map[np.arange(rows.size), rows * n + cols] = 1.0
        flat = ad.add(flat, ad.matmul(ad.reshape(ad.slice_(raw, (slice(n, None),)), (1, rows.size)), o_map))
    L = ad.reshape(flat, (n, n))
    return ad.matmul(L, ad.transpose(L))


def _raw_from_q(Q: np.ndarray) -> np.ndarray:
    n = Q.shape[0]
    L = np.linalg.cholesky(Q)
    d = np.diag(L) - 1e-9
    raw_diag = d + np.log(-np.expm1(-d))  # inverse softplus
    rows, cols = np.tril_indices(n, -1)
    return np.concatenate([raw_diag, L[rows, cols]])


def fit_Q_supervised(
    trajectories,
    transition,
    em: EmissionModel,
    init: Gaussian | None = None,
    q_init=None,
    iterations: int = 200,
    learning_rate: float = 0.05,
    chunk_len: int = 64,
    streams: int = 16,
) -> np.ndarray:
    """Fit ``Q = L L^T`` so that filtered means match the true states in mean square.

    ``transition`` is a constant matrix or an :class:`ExpertPrior`. Each
    trajectory is split into ``streams`` segments filtered side by side,
    with truncated backpropagation over ``chunk_len`` steps.
    """
    prior = transition if isinstance(transition, ExpertPrior) else ExpertPrior(mode="fixed", matrix=np.asarray(transition, dtype=float))
    n = em.state_dim
    init = default_init(n) if init is None else init
    Q0 = np.eye(n) if q_init is None else np.asarray(q_init, dtype=float)
    params = {"raw": _raw_from_q(Q0)}
    if iterations <= 0:
        return Q0.copy()

    ys, xs = [], []
    for t in trajectories:
        length = len(t.y) // streams
        for s in range(streams):
            ys.append(t.y[s * length : (s + 1) * length])
            xs.append(t.x[s * length : (s + 1) * length])
    length = min(len(y) for y in ys)
    Y = np.stack([y[:length] for y in ys])[..., None]
    X = np.stack([x[:length] for x in xs])[..., None]
    B = Y.shape[0]
    H, R = em.H, em.R
    n_chunks = -(-length // chunk_len)
    opt = Adam(params, lr=learning_rate)
    x_c = np.broadcast_to(init.mean[:, None], (B, n, 1)).copy()
    P_c = np.broadcast_to(init.cov, (B, n, n)).copy()
    fresh = True

    for it in range(iterations):
        chunk = it % n_chunks
        if chunk == 0:
            x_c = np.broadcast_to(init.mean[:, None], (B, n, 1)).copy()
            P_c = np.broadcast_to(init.cov, (B, n, n)).copy()
            fresh = True
        tape = ad.Tape()
        raw = tape.leaf(params["raw"])
        Q = _q_from_raw(raw, n)
        x, P = x_c, P_c
        err = None
        t0, t1 = chunk * chunk_len, min(length, (chunk + 1) * chunk_len)
        for k in range(t0, t1):
            if not (fresh and k == 0):
                F = prior.base(x)
                x = ad.matmul(F, x)
                P = ad.symmetrize(ad.add(ad.matmul(ad.matmul(F, P), ad.transpose(F)), Q))
            HP = ad.matmul(H, P)
            S = ad.add(ad.matmul(HP, H.T), R)
            gain = ad.transpose(ad.cho_solve(S, HP))
            x = ad.add(x, ad.matmul(gain, ad.sub(Y[:, k], ad.matmul(H, x))))
            P = ad.symmetrize(ad.sub(P, ad.matmul(gain, HP)))
            d = ad.sub(x, X[:, k])
            sq = ad.sum_(ad.mul(d, d))
            err = sq if err is None else ad.add(err, sq)
        fresh = False
        loss = ad.scale(err, 1.0 / (B * (t1 - t0)))
        grads = tape.backward(loss)
        params = opt.step(params, {"raw": grads[raw]})
        x_c, P_c = ad.value_of(x).copy(), ad.value_of(P).copy()

    return ad.value_of(_q_from_raw(params["raw"], n))


# bias-variance-noise decomposition


@dataclass
class BiasVariance:
    """Terms of ``E|yhat - y|^2 = E|yhat - y*|^2 + E|y* - y|^2 + residual``."""

    total: float  # E|yhat - y|^2
    reducible: float  # E|yhat - y*|^2
    optimal: float  # E|y* - y|^2
    residual: float  # 2 E[(yhat - y*)^T (y* - y)], zero in expectation
    residual_se: float
    noise_trace: float  # tr(R)
    optimal_vs_truth: float = float("nan")  # E|y* - H x|^2 when the truth is given
    noise_residual: float = float("nan")  # optimal - optimal_vs_truth - tr(R)


def bias_variance_diagnostic(y_model, y_optimal, y, em: EmissionModel, Hx=None) -> BiasVariance:
    """Decompose the predictive error of ``y_model`` against the optimal predictions.

    Both estimates must be predictions of ``y_k`` from ``y_<k`` only; the
    cross term then has zero mean because the optimal innovations are
    uncorrelated with the past.
    """
    a = np.asarray(y_model, dtype=float)
    b = np.asarray(y_optimal, dtype=float)
    y = np.asarray(y, dtype=float)
    if a.shape != b.shape or a.shape != y.shape:
        raise ValueError("estimate and observation arrays must share a shape")
    a, b, y = (v.reshape(-1, v.shape[-1]) for v in (a, b, y))
    cross = 2.0 * np.sum((a - b) * (b - y), axis=-1)
    total = float(np.mean(np.sum((a - y) ** 2, axis=-1)))
    reducible = float(np.mean(np.sum((a - b) ** 2, axis=-1)))
    optimal = float(np.mean(np.sum((b - y) ** 2, axis=-1)))
    out = BiasVariance(
        total=total,
        reducible=reducible,
        optimal=optimal,
        residual=total - reducible - optimal,
        residual_se=float(np.std(cross, ddof=1) / math.sqrt(len(cross))) if len(cross) > 1 else float("nan"),
        noise_trace=float(np.trace(em.R)),
    )
    if Hx is not None:
        hx = np.asarray(Hx, dtype=float).reshape(b.shape)
        out.optimal_vs_truth = float(np.mean(np.sum((b - hx) ** 2, axis=-1)))
        out.noise_residual = out.optimal - out.optimal_vs_truth - out.noise_trace
    return out
