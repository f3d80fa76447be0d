"""Smoothing on top of the learned recursion.

Two routes to ``p(x_k | y_0:K)``:

* :func:`linearized_smooth` runs a Rauch-Tung-Striebel backward pass over
  the decoded transitions of a finished filter run, no training needed;
* :func:`parameterized_smoother_forward` runs a two-sided model whose
  transitions see both past and future measurements, trained on the
  pseudo-likelihood of each ``y_k`` given all the others.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import run
from .gaussian import EmissionModel, Gaussian, NumericalError, cho_solve, symmetrize
from .neural import Model
from .recursive import FilterOutput, output_from_pass
from .training import TrainConfig, TrainResult, train

__all__ = [
    "SmootherOutput",
    "linearized_smooth",
    "parameterized_smoother_forward",
    "train_smoother",
]

MEAN_REFS = ("prior", "posterior")


@dataclass
class SmootherOutput:
    mean: np.ndarray  # (K+1, N)
    cov: np.ndarray  # (K+1, N, N)
    gains: np.ndarray | None = None  # (K, N, N); gains[k-1] maps step k back to k-1

    def __len__(self):
        return len(self.mean)

    def smoothed(self, k: int) -> Gaussian:
        return Gaussian(self.mean[k], self.cov[k])


def linearized_smooth(fo: FilterOutput, mean_ref: str = "prior") -> SmootherOutput:
    """Backward pass using the stored per-step transitions ``fo.F``.

    ``mean_ref`` picks what the smoothed mean is corrected against:
    ``"prior"`` (the predicted mean, the usual RTS form) or ``"posterior"``.
    """
    if mean_ref not in MEAN_REFS:
        raise ValueError(f"mean_ref must be one of {MEAN_REFS}")
    T = len(fo.post_mean)
    n = fo.post_mean.shape[1]
    z = np.array(fo.post_mean, dtype=float)
    G = np.array(fo.post_cov, dtype=float)
    gains = np.zeros((max(T - 1, 0), n, n))
    ref = fo.prior_mean if mean_ref == "prior" else fo.post_mean
    for k in range(T - 1, 0, -1):
        P_prev = fo.post_cov[k - 1]
        try:
            # J = P_prev F^T P_pred^-1, computed as a solve against the symmetric P_pred
            J = cho_solve(fo.prior_cov[k], fo.F[k] @ P_prev).T
        except NumericalError as exc:
            raise NumericalError(f"predicted covariance singular at step {k}") from exc
        gains[k - 1] = J
        z[k - 1] = fo.post_mean[k - 1] + J @ (z[k] - ref[k])
        G[k - 1] = symmetrize(P_prev + J @ (G[k] - fo.prior_cov[k]) @ J.T)
    return SmootherOutput(mean=z, cov=G, gains=gains)


def parameterized_smoother_forward(y_seq, model: Model, em: EmissionModel) -> FilterOutput:
    """Two-sided pass over a whole sequence.

    ``prior_*`` of the result are the leave-one-out beliefs given ``y_-k``
    and ``post_*`` the smoothed ones; ``loss_terms`` is the pseudo-likelihood.
    """
    if not model.two_sided:
        raise ValueError("parameterized smoothing needs a two-sided model")
    y = np.asarray(getattr(y_seq, "y", y_seq), dtype=float)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError(f"expected a (K+1, M) observation array, got shape {y.shape}")
    return output_from_pass(run(model, em, y[None]), em)


def train_smoother(
    model: Model,
    em: EmissionModel,
    train_ys: list[np.ndarray],
    config: TrainConfig,
    val_ys: list[np.ndarray] | None = None,
) -> TrainResult:
    if not model.two_sided:
        raise ValueError("parameterized smoothing needs a two-sided model")
    return train(model, em, train_ys, config, val_ys)
