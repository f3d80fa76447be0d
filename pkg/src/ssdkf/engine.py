"""Batched forward recursion shared by every learned model.

One pass runs ``T`` steps for ``B`` independent streams at once. Each step
decodes a belief for ``x_k`` from the encoder features, scores ``y_k``
under the implied predictive Gaussian, conditions on ``y_k`` and advances
the forward encoder:

* recursive models push the previous posterior through the decoded
  transition ``(F, e, Q)``;
* recurrent models take the decoded ``(e, L L^T)`` as the prior directly.

A fresh sequence is the carry ``h = 0, x = 0, P = 0``: the recursive
prior then reduces to ``N(e_0, Q_0)``, the decoded initial belief.

Two-sided models also run a backward encoder over the chunk; the state it
starts from at the chunk end is supplied by the caller (zero at the
sequence end).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .gaussian import EmissionModel, NumericalError
from .neural import Model, decode_state, decode_transition, gru_step

__all__ = ["Carry", "Pass", "fresh_carry", "backward_hidden_sweep", "run"]


@dataclass
class Carry:
    """Detached state handed from one chunk to the next."""

    h: np.ndarray  # (B, D) forward encoder state for the next step
    x: np.ndarray  # (B, N, 1) previous posterior mean
    P: np.ndarray  # (B, N, N) previous posterior covariance


def fresh_carry(model: Model, batch: int) -> Carry:
    n = model.state_dim
    return Carry(
        h=np.zeros((batch, model.hidden_dim)),
        x=np.zeros((batch, n, 1)),
        P=np.zeros((batch, n, n)),
    )


@dataclass
class Pass:
    """Result of one forward pass over a chunk (arrays are ``(B, T, ...)``)."""

    loss: object  # Var on a tape, or (1, 1) array
    terms: np.ndarray
    carry: Carry
    prior_mean: np.ndarray | None = None
    prior_cov: np.ndarray | None = None
    post_mean: np.ndarray | None = None
    post_cov: np.ndarray | None = None
    F: np.ndarray | None = None
    e: np.ndarray | None = None
    Q: np.ndarray | None = None
    penalty: object = None


def backward_hidden_sweep(model: Model, params, y_in: np.ndarray) -> np.ndarray:
    """Untaped backward-encoder states for a whole stack of sequences.

    Returns ``hb`` with ``hb[:, k]`` summarizing ``y_{k+1:}``, ``hb[:, -1] = 0``.
    """
    B, T, _ = y_in.shape
    hb = np.zeros((B, T, model.hidden_dim))
    h = np.zeros((B, model.hidden_dim))
    for k in range(T - 2, -1, -1):
        h = gru_step(h, y_in[:, k + 1], params, "gru_bwd")
        hb[:, k] = h
    return hb


def run(
    model: Model,
    em: EmissionModel,
    y: np.ndarray,
    params=None,
    carry: Carry | None = None,
    bwd_next: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    record: bool = True,
    chunk_offset: int = 0,
    penalty: float = 0.0,
) -> Pass:
    """Run the recursion over ``y`` of shape ``(B, T, M)``.

    ``params`` may hold leaf ``Var`` objects (training) or arrays; it
    defaults to ``model.params``. ``bwd_next`` is ``(h_bwd, y_next, mask)``
    describing the backward encoder just past the chunk end, per stream;
    ``None`` means every stream ends with the chunk.

    With ``penalty > 0`` the returned ``Pass.penalty`` holds
    ``penalty * sum_k (|dF_k|^2 + |dF_k x_k-1 + e_k|^2)``: how far the
    decoded transition, and the mean it predicts, move away from the prior
    transition. ``loss`` never includes it.
    """
    params = model.params if params is None else params
    y = np.asarray(y, dtype=float)
    if y.ndim != 3 or y.shape[-1] != model.obs_dim:
        raise ValueError(f"expected y of shape (B, T, {model.obs_dim}), got {y.shape}")
    B, T, _ = y.shape
    n = model.state_dim
    H, R = em.H, em.R
    if H.shape != (model.obs_dim, n):
        raise ValueError(f"emission H {H.shape} does not match model dims ({model.obs_dim}, {n})")
    Ht = H.T
    carry = fresh_carry(model, B) if carry is None else carry
    y_in = model.normalize(y)
    y_col = y[..., None]

    h_bwd = None
    if model.two_sided:
        h_bwd = [None] * T
        if bwd_next is None:
            h = np.zeros((B, model.hidden_dim))
        else:
            hb_next, y_next, mask = bwd_next
            h = ad.mul(gru_step(hb_next, model.normalize(y_next), params, "gru_bwd"), mask[:, None])
        h_bwd[T - 1] = h
        for k in range(T - 2, -1, -1):
            h = gru_step(h, y_in[:, k + 1], params, "gru_bwd")
            h_bwd[k] = h

    h = carry.h
    x, P = carry.x, carry.P
    loss = None
    reg = None
    terms = np.empty((B, T))
    rec = {}
    if record:
        rec = {
            "prior_mean": np.empty((B, T, n)),
            "prior_cov": np.empty((B, T, n, n)),
            "post_mean": np.empty((B, T, n)),
            "post_cov": np.empty((B, T, n, n)),
            "F": np.empty((B, T, n, n)),
            "e": np.empty((B, T, n)),
            "Q": np.empty((B, T, n, n)),
        }

    for k in range(T):
        if model.kind == "recursive":
            feats = h if h_bwd is None else ad.concat([h, h_bwd[k]], axis=-1)
            F, e, Q, _, dF = decode_transition(feats, params, model.prior, x, n, model.diag_offset)
            if penalty:
                shift = ad.add(ad.matmul(dF, x), e)
                size = ad.add(ad.sum_(ad.mul(dF, dF)), ad.sum_(ad.mul(shift, shift)))
                reg = size if reg is None else ad.add(reg, size)
            x_pr = ad.add(ad.matmul(F, x), e)
            P_pr = ad.symmetrize(ad.add(ad.matmul(ad.matmul(F, P), ad.transpose(F)), Q))
        else:
            x_pr, L = decode_state(h, None if h_bwd is None else h_bwd[k], params, n, model.diag_offset)
            F, e = np.zeros((B, n, n)), x_pr
            Q = ad.matmul(L, ad.transpose(L))
            P_pr = Q

        HP = ad.matmul(H, P_pr)
        S = ad.add(ad.matmul(HP, Ht), R)
        resid = ad.sub(y_col[:, k], ad.matmul(H, x_pr))
        try:
            term = ad.add(ad.quad_form(S, resid), ad.logdet(S))
            gain = ad.transpose(ad.cho_solve(S, HP))
        except NumericalError as exc:
            raise NumericalError(f"innovation covariance singular at step {chunk_offset + k}") from exc
        tv = ad.value_of(term).reshape(B)
        if not np.all(np.isfinite(tv)):
            raise NumericalError(f"non-finite loss at step {chunk_offset + k}")
        terms[:, k] = tv
        loss = term if loss is None else ad.add(loss, term)
        x = ad.add(x_pr, ad.matmul(gain, resid))
        P = ad.symmetrize(ad.sub(P_pr, ad.matmul(gain, HP)))

        if record:
            rec["prior_mean"][:, k] = ad.value_of(x_pr)[..., 0]
            rec["prior_cov"][:, k] = ad.value_of(P_pr)
            rec["post_mean"][:, k] = ad.value_of(x)[..., 0]
            rec["post_cov"][:, k] = ad.value_of(P)
            rec["F"][:, k] = ad.value_of(F)
            rec["e"][:, k] = ad.value_of(e)[..., 0]
            rec["Q"][:, k] = ad.value_of(Q)

        h = gru_step(h, y_in[:, k], params, "gru")

    loss = ad.sum_(loss)
    if reg is not None:
        reg = ad.scale(reg, penalty)
    out_carry = Carry(h=ad.value_of(h).copy(), x=ad.value_of(x).copy(), P=ad.value_of(P).copy())
    return Pass(loss=loss, terms=terms, carry=out_carry, penalty=reg, **rec)
