"""GRU encoder and MLP decoder heads emitting locally linear transitions.

Parameters live in a flat ``dict[str, ndarray]`` so the same dict can be
handed to the tape (as leaf ``Var`` objects) or used directly for
inference. Names are prefixed by component: ``gru.``, ``gru_bwd.`` (the
backward-in-time encoder of the two-sided models) and ``dec.``.

Row-vector convention: hidden states have shape ``(batch, D)``, weight
matrices ``(out, in)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad

__all__ = [
    "DIAG_FLOOR",
    "CHECKPOINT_VERSION",
    "ExpertPrior",
    "Model",
    "Transition",
    "decode_state",
    "decode_transition",
    "gru_step",
    "init_params",
    "linear_taylor_prior",
    "load_checkpoint",
    "load_checkpoint_meta",
    "lorenz_prior",
    "save_checkpoint",
]

DIAG_FLOOR = 1e-6
CHECKPOINT_VERSION = 1


@dataclass(frozen=True, eq=False)
class ExpertPrior:
    """Base transition matrix ``F0`` that the decoder output is added to.

    ``mode`` is one of

    * ``"none"``: no base, the decoded block is the whole transition matrix;
    * ``"fixed"``: a constant ``matrix``;
    * ``"state"``: ``F0 = sum_{n<=order} (dt A(x))^n / n!`` with the
      affine state-dependent generator ``vec A(x) = vec(A0) + x^T C``
      evaluated at the previous posterior mean (Lorenz form).
    """

    mode: str = "none"
    matrix: np.ndarray | None = None
    A0: np.ndarray | None = None
    coeffs: np.ndarray | None = None
    dt: float = 0.0
    order: int = 2

    def __post_init__(self):
        if self.mode not in ("none", "fixed", "state"):
            raise ValueError(f"unknown prior mode {self.mode!r}")
        if self.mode == "fixed" and self.matrix is None:
            raise ValueError("fixed prior needs a matrix")
        if self.mode == "state" and (self.A0 is None or self.coeffs is None):
            raise ValueError("state-dependent prior needs A0 and coeffs")

    def generator(self, x):
        """``A(x)`` for column states ``x`` of shape ``(..., N, 1)``."""
        n = self.A0.shape[0]
        xv = ad.value_of(x)
        batch = xv.shape[:-2]
        row = ad.reshape(x, batch + (1, n))
        flat = ad.matmul(row, self.coeffs)
        return ad.add(ad.reshape(flat, batch + (n, n)), self.A0)

    def base(self, x_prev):
        """``F0`` at the previous posterior mean, or ``None`` for mode none."""
        if self.mode == "none":
            return None
        if self.mode == "fixed":
            return self.matrix
        dA = ad.scale(self.generator(x_prev), self.dt)
        total = ad.add(dA, np.eye(self.A0.shape[0]))
        term = dA
        for k in range(2, self.order + 1):
            term = ad.scale(ad.matmul(term, dA), 1.0 / k)
            total = ad.add(total, term)
        return total

    def to_json(self) -> dict:
        out: dict = {"mode": self.mode, "dt": self.dt, "order": self.order}
        for name in ("matrix", "A0", "coeffs"):
            arr = getattr(self, name)
            if arr is not None:
                out[name] = {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
        return out

    @classmethod
    def from_json(cls, doc: dict) -> ExpertPrior:
        arrays = {
            name: np.array(doc[name]["data"], dtype=float).reshape(doc[name]["shape"])
            for name in ("matrix", "A0", "coeffs")
            if name in doc
        }
        return cls(mode=doc["mode"], dt=float(doc["dt"]), order=int(doc["order"]), **arrays)


def linear_taylor_prior(A, dt: float = 1.0, order: int = 1, blocks: int = 1) -> ExpertPrior:
    """Fixed prior from a truncated series of ``exp(dt A)``, repeated block-diagonally."""
    from .gaussian import taylor_matrix_exp

    F = taylor_matrix_exp(np.asarray(A, dtype=float), dt, order)
    return ExpertPrior(mode="fixed", matrix=np.kron(np.eye(blocks), F))


def lorenz_prior(sigma=10.0, rho=28.0, beta=8.0 / 3.0, dt=0.05, order=2) -> ExpertPrior:
    """State-dependent Taylor prior for the Lorenz system.

    The generator is ``[[-s, s, 0], [rho - x3, -1, 0], [x2, 0, -beta]]``,
    which satisfies ``A(x) x = f(x)`` for the Lorenz vector field.
    """
    A0 = np.array([[-sigma, sigma, 0.0], [rho, -1.0, 0.0], [0.0, 0.0, -beta]])
    coeffs = np.zeros((3, 9))
    coeffs[2, 3] = -1.0  # x3 -> A[1, 0]
    coeffs[1, 6] = 1.0  # x2 -> A[2, 0]
    return ExpertPrior(mode="state", A0=A0, coeffs=coeffs, dt=dt, order=order)


@dataclass
class Model:
    """A trainable transition (``kind="recursive"``) or direct-state
    (``kind="recurrent"``) model, one- or two-sided."""

    kind: str
    state_dim: int
    obs_dim: int
    params: dict[str, np.ndarray]
    hidden_dim: int = 64
    mlp_dim: int = 64
    two_sided: bool = False
    prior: ExpertPrior = field(default_factory=ExpertPrior)
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None
    diag_offset: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("recursive", "recurrent"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_shift is None:
            self.input_shift = np.zeros(self.obs_dim)
        if self.input_scale is None:
            self.input_scale = np.ones(self.obs_dim)

    @property
    def output_dim(self) -> int:
        return decoder_output_dim(self.kind, self.state_dim)

    def normalize(self, y: np.ndarray) -> np.ndarray:
        return (y - self.input_shift) / self.input_scale

    def with_params(self, params: dict[str, np.ndarray]) -> Model:
        from dataclasses import replace

        return replace(self, params=params)


def tri_size(n: int) -> int:
    return n * (n + 1) // 2


def decoder_output_dim(kind: str, n: int) -> int:
    if kind == "recursive":
        return n * n + n + tri_size(n)
    return n + tri_size(n)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _gru_params(rng, prefix, m, d):
    out = {}
    for gate in ("z", "r", "h"):
        out[f"{prefix}.W_{gate}"] = _uniform(rng, (d, m + d), m + d)
        out[f"{prefix}.b_{gate}"] = _uniform(rng, (d,), m + d)
    return out


def init_params(
    seed: int,
    kind: str,
    state_dim: int,
    obs_dim: int,
    hidden_dim: int = 64,
    mlp_dim: int = 64,
    two_sided: bool = False,
) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights, with the last decoder layer zeroed
    so the untrained model outputs exactly the prior's transition."""
    rng = np.random.default_rng(seed)
    params = _gru_params(rng, "gru", obs_dim, hidden_dim)
    if two_sided:
        params.update(_gru_params(rng, "gru_bwd", obs_dim, hidden_dim))
    feat = 2 * hidden_dim if two_sided else hidden_dim
    params["dec.W1"] = _uniform(rng, (mlp_dim, feat), feat)
    params["dec.b1"] = _uniform(rng, (mlp_dim,), feat)
    out = decoder_output_dim(kind, state_dim)
    params["dec.W2"] = np.zeros((out, mlp_dim))
    params["dec.b2"] = np.zeros(out)
    return params


def gru_step(h, y, params, prefix: str = "gru"):
    """One GRU cell update; ``h`` is ``(..., D)``, ``y`` is ``(..., M)``."""
    W_z, b_z = params[f"{prefix}.W_z"], params[f"{prefix}.b_z"]
    W_r, b_r = params[f"{prefix}.W_r"], params[f"{prefix}.b_r"]
    W_h, b_h = params[f"{prefix}.W_h"], params[f"{prefix}.b_h"]
    d = ad.value_of(W_z).shape[0]
    m = ad.value_of(W_z).shape[1] - d
    if ad.value_of(h).shape[-1] != d or ad.value_of(y).shape[-1] != m:
        raise ValueError(
            f"gru_step: expected h (..., {d}) and y (..., {m}), "
            f"got {ad.value_of(h).shape} and {ad.value_of(y).shape}"
        )
    yh = ad.concat([y, h], axis=-1)
    z = ad.sigmoid(ad.linear(yh, W_z, b_z))
    r = ad.sigmoid(ad.linear(yh, W_r, b_r))
    cand = ad.tanh(ad.linear(ad.concat([y, ad.mul(r, h)], axis=-1), W_h, b_h))
    return ad.add(h, ad.mul(z, ad.sub(cand, h)))


@lru_cache(maxsize=None)
def _tri_scatter(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Constant maps from (diag, strictly-lower) entries to a flat n*n matrix."""
    rows, cols = np.tril_indices(n, -1)
    off = np.zeros((rows.size, n * n))
    off[np.arange(rows.size), rows * n + cols] = 1.0
    diag = np.zeros((n, n * n))
    diag[np.arange(n), np.arange(n) * (n + 1)] = 1.0
    return diag, off


def _cholesky_factor(raw, n: int, diag_offset: float):
    """Lower-triangular factor from ``n(n+1)/2`` raw outputs: the first ``n``
    become the diagonal through softplus plus a floor, the rest fill the
    strictly lower triangle row by row."""
    batch = ad.value_of(raw).shape[:-1]
    diag_map, off_map = _tri_scatter(n)
    raw_diag = ad.slice_(raw, (..., slice(0, n)))
    if diag_offset:
        raw_diag = ad.add(raw_diag, diag_offset)
    diag = ad.add(ad.softplus(raw_diag), DIAG_FLOOR)
    flat = ad.matmul(diag, diag_map)
    if n > 1:
        flat = ad.add(flat, ad.matmul(ad.slice_(raw, (..., slice(n, None))), off_map))
    return ad.reshape(flat, batch + (n, n))


def _mlp(features, params):
    hidden = ad.tanh(ad.linear(features, params["dec.W1"], params["dec.b1"]))
    return ad.linear(hidden, params["dec.W2"], params["dec.b2"])


class Transition(NamedTuple):
    F: object
    e: object
    Q: object
    L: object
    dF: object


def decode_transition(h, params, prior: ExpertPrior, x_prev, state_dim: int, diag_offset: float = 0.0) -> Transition:
    """Decode ``(F, e, Q, L, dF)`` from features ``h`` of shape ``(..., D)``.

    ``F = F0(x_prev) + dF`` where ``dF`` is the decoded block, ``e`` is a
    column ``(..., N, 1)`` and ``Q = L L^T``.
    """
    n = state_dim
    out = _mlp(h, params)
    batch = ad.value_of(out).shape[:-1]
    dF = ad.reshape(ad.slice_(out, (..., slice(0, n * n))), batch + (n, n))
    e = ad.reshape(ad.slice_(out, (..., slice(n * n, n * n + n))), batch + (n, 1))
    L = _cholesky_factor(ad.slice_(out, (..., slice(n * n + n, None))), n, diag_offset)
    Q = ad.matmul(L, ad.transpose(L))
    base = prior.base(x_prev) if x_prev is not None else prior.base(np.zeros(batch + (n, 1)))
    F = dF if base is None else ad.add(base, dF)
    return Transition(F, e, Q, L, dF)


def decode_state(h_fwd, h_bwd, params, state_dim: int, diag_offset: float = 0.0):
    """Decode a direct belief ``(x, L)``; ``h_bwd`` is concatenated when given."""
    feats = h_fwd if h_bwd is None else ad.concat([h_fwd, h_bwd], axis=-1)
    n = state_dim
    out = _mlp(feats, params)
    batch = ad.value_of(out).shape[:-1]
    x = ad.reshape(ad.slice_(out, (..., slice(0, n))), batch + (n, 1))
    L = _cholesky_factor(ad.slice_(out, (..., slice(n, None))), n, diag_offset)
    return x, L


def _array_doc(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def _array_from(doc: dict) -> np.ndarray:
    return np.array(doc["data"], dtype=float).reshape(doc["shape"])


def save_checkpoint(model: Model, path, meta: dict | None = None) -> None:
    """Write ``model`` as JSON; arrays are flat row-major lists with shapes.

    ``meta`` is stored verbatim under ``"meta"`` (must be JSON-serializable).
    """
    groups: dict[str, dict] = {"gru": {}, "decoder": {}}
    for name, arr in model.params.items():
        group = "decoder" if name.startswith("dec.") else "gru"
        groups[group][name] = _array_doc(np.asarray(arr))
    doc = {
        "version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "dims": {
            "kind": model.kind,
            "state": model.state_dim,
            "obs": model.obs_dim,
            "hidden": model.hidden_dim,
            "mlp": model.mlp_dim,
            "two_sided": model.two_sided,
            "diag_offset": model.diag_offset,
        },
        "gru": groups["gru"],
        "decoder": groups["decoder"],
        "prior": model.prior.to_json(),
        "normalization": {
            "shift": model.input_shift.tolist(),
            "scale": model.input_scale.tolist(),
        },
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint_meta(path) -> dict:
    return json.loads(Path(path).read_text()).get("meta", {})


def load_checkpoint(path) -> Model:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    dims = doc["dims"]
    params = {name: _array_from(a) for group in ("gru", "decoder") for name, a in doc[group].items()}
    return Model(
        kind=dims["kind"],
        state_dim=int(dims["state"]),
        obs_dim=int(dims["obs"]),
        params=params,
        hidden_dim=int(dims["hidden"]),
        mlp_dim=int(dims["mlp"]),
        two_sided=bool(dims["two_sided"]),
        prior=ExpertPrior.from_json(doc["prior"]),
        input_shift=np.array(doc["normalization"]["shift"], dtype=float),
        input_scale=np.array(doc["normalization"]["scale"], dtype=float),
        diag_offset=float(dims.get("diag_offset", 0.0)),
        seed=int(doc["seed"]),
    )
