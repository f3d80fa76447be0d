"""Gradient training of the learned models by truncated backpropagation.

Each training trajectory is cut into ``streams`` contiguous segments that
are processed side by side; every optimizer round takes one chunk of
``chunk_len`` steps from every segment. Beliefs and encoder states are
carried across chunks without gradient. At the start of an epoch a
segment resumes from the state its left neighbour ended the previous
epoch in; in the very first epoch that state comes from an untaped
warm-up run over the samples just before the segment. The first segment
of a trajectory always starts fresh, as the recursion prescribes.

The objective of a round is the mean per-step loss term over the chunk,
optionally plus a penalty on the decoded correction to the prior
transition (see :func:`ssdkf.engine.run`). The penalty matters when parts
of the state are not observed: the likelihood is then unchanged by
re-expressing the hidden coordinates, and without a pull towards the
prior the learned transitions wander along those flat directions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .engine import Carry, backward_hidden_sweep, fresh_carry, run
from .gaussian import EmissionModel, NumericalError
from .neural import Model

__all__ = ["Adam", "TrainConfig", "TrainResult", "evaluate_loss", "train"]

log = logging.getLogger(__name__)


class Adam:
    """Adaptive-moment gradient descent with global-norm clipping."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, clip=10.0):
        self.lr, self.b1, self.b2, self.eps, self.clip = lr, betas[0], betas[1], eps, clip
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if not np.isfinite(norm):
            raise NumericalError("non-finite gradient")
        factor = min(1.0, self.clip / norm) if self.clip and norm > 0 else 1.0
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = {}
        for k, p in params.items():
            g = grads[k] * factor
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            out[k] = p - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return out


@dataclass
class TrainConfig:
    iterations: int = 1000
    learning_rate: float = 1e-3
    chunk_len: int = 64
    streams: int = 1
    warmup: int = 256
    eval_every: int = 100
    clip: float = 10.0
    schedule: str = "constant"  # or "cosine", decaying to zero at the last round
    residual_penalty: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown learning-rate schedule {self.schedule!r}")
        if self.chunk_len < 1 or self.streams < 1 or self.eval_every < 1:
            raise ValueError("chunk_len, streams and eval_every must be >= 1")

    def rate(self, it: int) -> float:
        if self.schedule == "cosine":
            return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (it - 1) / self.iterations))
        return self.learning_rate


@dataclass
class TrainResult:
    model: Model
    final_model: Model
    curve: list[tuple[int, float, float]] = field(default_factory=list)
    best_val: float = float("nan")


def evaluate_loss(model: Model, em: EmissionModel, ys: list[np.ndarray]) -> float:
    """Mean per-step loss term over whole sequences, each run from a fresh start."""
    total, count = 0.0, 0
    for y in ys:
        p = run(model, em, np.asarray(y)[None], record=False)
        total += float(p.terms.sum())
        count += p.terms.size
    return total / count


def _segments(ys: list[np.ndarray], streams: int):
    """Stack every trajectory's ``streams`` equal segments; returns ``(B, L, M)`` plus bookkeeping."""
    length = min(len(y) for y in ys) // streams
    if length < 1:
        raise ValueError("training data shorter than the number of streams")
    segs, origin = [], []
    for j, y in enumerate(ys):
        for s in range(streams):
            segs.append(y[s * length : (s + 1) * length])
            origin.append((j, s * length))
    return np.stack(segs), origin, length


def train(
    model: Model,
    em: EmissionModel,
    train_ys: list[np.ndarray],
    config: TrainConfig,
    val_ys: list[np.ndarray] | None = None,
) -> TrainResult:
    """Fit ``model.params`` to the self-supervised loss.

    Returns the parameters with the best validation loss (the final ones
    when no validation data is given) together with the loss curve
    ``(iteration, train_loss, val_loss)``; ``val_loss`` is NaN on rounds
    without evaluation.
    """
    ys = [np.asarray(y, dtype=float) for y in train_ys]
    params = {k: np.array(v, dtype=float) for k, v in model.params.items()}
    current = model.with_params(params)
    curve: list[tuple[int, float, float]] = []
    best_val = float("inf")
    best_params = params

    if val_ys:
        best_val = evaluate_loss(current, em, val_ys)
        curve.append((0, float("nan"), best_val))
    if config.iterations <= 0:
        return TrainResult(current, current, curve, best_val if val_ys else float("nan"))

    data, origin, seg_len = _segments(ys, config.streams)
    B = data.shape[0]
    n_chunks = -(-seg_len // config.chunk_len)
    optimizer = Adam(params, lr=config.learning_rate, clip=config.clip)
    end_carry: Carry | None = None
    carry = fresh_carry(current, B)
    hb_full = None

    for it in range(1, config.iterations + 1):
        chunk = (it - 1) % n_chunks
        if chunk == 0:
            carry = _epoch_start_carry(current, em, ys, origin, end_carry, config.warmup)
            if current.two_sided:
                hb_full = [backward_hidden_sweep(current, current.params, current.normalize(y)[None])[0] for y in ys]
        t0 = chunk * config.chunk_len
        t1 = min(seg_len, t0 + config.chunk_len)
        bwd = _bwd_next(current, ys, origin, t1, hb_full) if current.two_sided else None

        tape = ad.Tape()
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        try:
            p = run(current, em, data[:, t0:t1], params=leaves, carry=carry, bwd_next=bwd, record=False, chunk_offset=t0, penalty=config.residual_penalty)
        except NumericalError as exc:
            raise NumericalError(f"training round {it}: {exc}") from exc
        steps = p.terms.size
        objective = p.loss if p.penalty is None else ad.add(p.loss, p.penalty)
        objective = ad.scale(objective, 1.0 / steps)
        grads = tape.backward(objective)
        optimizer.lr = config.rate(it)
        params = optimizer.step(params, {k: grads[v] for k, v in leaves.items()})
        current = current.with_params(params)
        carry = p.carry
        if chunk == n_chunks - 1:
            end_carry = carry

        val = float("nan")
        if val_ys and (it % config.eval_every == 0 or it == config.iterations):
            val = evaluate_loss(current, em, val_ys)
            if val < best_val:
                best_val, best_params = val, params
        train_loss = float(p.terms.mean())
        if not np.isfinite(train_loss):
            raise NumericalError(f"training round {it}: non-finite loss")
        curve.append((it, train_loss, val))
        if it % max(1, config.eval_every) == 0:
            log.info("round %d train %.5f val %.5f", it, train_loss, val)

    final = current
    best = current.with_params(best_params) if val_ys else current
    return TrainResult(best, final, curve, best_val if val_ys else float("nan"))


def _epoch_start_carry(model, em, ys, origin, end_carry, warmup) -> Carry:
    B = len(origin)
    carry = fresh_carry(model, B)
    for b, (j, start) in enumerate(origin):
        if start == 0:
            continue
        if end_carry is not None and b > 0 and origin[b - 1][0] == j:
            carry.h[b], carry.x[b], carry.P[b] = end_carry.h[b - 1], end_carry.x[b - 1], end_carry.P[b - 1]
            continue
        lo = max(0, start - warmup)
        bwd = None
        if model.two_sided:
            hb = backward_hidden_sweep(model, model.params, model.normalize(ys[j][lo : start + 1])[None])
            bwd = (hb[:, -1], ys[j][start][None], np.ones(1))
        p = run(model, em, ys[j][lo:start][None], carry=None, bwd_next=bwd, record=False)
        carry.h[b], carry.x[b], carry.P[b] = p.carry.h[0], p.carry.x[0], p.carry.P[0]
    return carry


def _bwd_next(model, ys, origin, t1, hb_full):
    B = len(origin)
    h = np.zeros((B, model.hidden_dim))
    y_next = np.zeros((B, model.obs_dim))
    mask = np.zeros(B)
    for b, (j, start) in enumerate(origin):
        g = start + t1
        if g < len(ys[j]):
            h[b] = hb_full[j][g]
            y_next[b] = ys[j][g]
            mask[b] = 1.0
    return h, y_next, mask
