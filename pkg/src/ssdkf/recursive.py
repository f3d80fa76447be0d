"""Recursive filter: learned locally linear transitions inside a Kalman recursion.

:func:`filter_forward` runs a single sequence and returns every prior,
posterior and decoded transition; :func:`loss_of` gives the self-supervised
objective ``sum_k (y_k - H x_k|<k)^T M_k^-1 (.) + log det M_k`` with
``M_k = H P_k|<k H^T + R``; :func:`forecast` rolls the model past the data
end by feeding its own predicted measurements back into the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .engine import Carry, Pass, run
from .gaussian import EmissionModel, Gaussian, marginalize_linear
from .neural import Model, decode_state, decode_transition, gru_step

__all__ = [
    "FilterOutput",
    "TransitionParams",
    "filter_forward",
    "forecast",
    "loss_of",
    "predictive_nll",
]


@dataclass(frozen=True)
class TransitionParams:
    F: np.ndarray
    e: np.ndarray
    Q: np.ndarray


@dataclass
class FilterOutput:
    """Per-step beliefs of one sequence; arrays are indexed by step first.

    For two-sided models ``prior_*`` hold the leave-one-out beliefs
    ``p(x_k | y_-k)`` and ``post_*`` the smoothed ones.
    """

    prior_mean: np.ndarray
    prior_cov: np.ndarray
    post_mean: np.ndarray
    post_cov: np.ndarray
    F: np.ndarray
    e: np.ndarray
    Q: np.ndarray
    loss_terms: np.ndarray
    H: np.ndarray
    R: np.ndarray
    final: Carry | None = None

    @property
    def total_loss(self) -> float:
        return float(self.loss_terms.sum())

    def __len__(self):
        return self.loss_terms.size

    def prior(self, k: int) -> Gaussian:
        return Gaussian(self.prior_mean[k], self.prior_cov[k])

    def posterior(self, k: int) -> Gaussian:
        return Gaussian(self.post_mean[k], self.post_cov[k])

    def transition(self, k: int) -> TransitionParams:
        return TransitionParams(self.F[k], self.e[k], self.Q[k])

    def predictive(self, k: int) -> Gaussian:
        """``N(H x_k|<k, H P_k|<k H^T + R)``, the density scored at step ``k``."""
        return Gaussian(self.H @ self.prior_mean[k], self.H @ self.prior_cov[k] @ self.H.T + self.R)


def output_from_pass(p: Pass, em: EmissionModel, index: int = 0) -> FilterOutput:
    final = Carry(h=p.carry.h[index], x=p.carry.x[index], P=p.carry.P[index])
    return FilterOutput(
        prior_mean=p.prior_mean[index],
        prior_cov=p.prior_cov[index],
        post_mean=p.post_mean[index],
        post_cov=p.post_cov[index],
        F=p.F[index],
        e=p.e[index],
        Q=p.Q[index],
        loss_terms=p.terms[index],
        H=em.H,
        R=em.R,
        final=final,
    )


def filter_forward(y_seq, model: Model, em: EmissionModel) -> FilterOutput:
    """Run the recursion over one sequence ``y_seq`` of shape ``(K+1, M)``.

    Accepts a :class:`~ssdkf.simulators.Trajectory` as well.
    """
    y = np.asarray(getattr(y_seq, "y", y_seq), dtype=float)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError(f"expected a (K+1, M) observation array, got shape {y.shape}")
    return output_from_pass(run(model, em, y[None]), em)


def loss_of(output: FilterOutput) -> float:
    return output.total_loss


def predictive_nll(output: FilterOutput) -> float:
    """``-sum_k log N(y_k | H x_k|<k, M_k)``; equals ``(L + (K+1) M log 2 pi) / 2``."""
    m = output.H.shape[0]
    return 0.5 * (output.total_loss + len(output) * m * math.log(2.0 * math.pi))


def forecast(output: FilterOutput, model: Model, em: EmissionModel, steps: int) -> list[Gaussian]:
    """Beliefs for ``x_{K+1}, ..., x_{K+steps}`` given ``y_{0:K}``.

    The first step is the prior the filter would form at ``K+1``. Later
    steps feed ``H`` times the previous forecast mean to the encoder as a
    pseudo-measurement, without conditioning on it.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if model.two_sided:
        raise ValueError("forecasting needs a one-sided model")
    final = output.final
    n = model.state_dim
    h = final.h[None]
    belief = Gaussian(final.x[:, 0], final.P)
    out = []
    for s in range(steps):
        if s > 0:
            pseudo = em.H @ belief.mean
            h = gru_step(h, model.normalize(pseudo)[None], model.params, "gru")
        if model.kind == "recursive":
            F, e, Q, _, _ = decode_transition(h, model.params, model.prior, belief.mean[None, :, None], n, model.diag_offset)
            belief = marginalize_linear(belief, F[0], e[0, :, 0], Q[0])
        else:
            x, L = decode_state(h, None, model.params, n, model.diag_offset)
            belief = Gaussian(x[0, :, 0], L[0] @ L[0].T)
        out.append(belief)
    return out
