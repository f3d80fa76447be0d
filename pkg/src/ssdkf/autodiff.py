"""Eager reverse-mode automatic differentiation over batched numpy arrays.

A :class:`Tape` records every primitive applied to a :class:`Var`; the
forward value is computed immediately and cached on the ``Var``. Calling
:meth:`Tape.backward` on a scalar root walks the records in reverse and
accumulates adjoints for every leaf.

All primitives follow numpy broadcasting, so the same code runs a single
sequence or a stack of sequences with a leading batch axis; gradients for
broadcast inputs (shared parameters) are summed over the broadcast axes.
Passing plain arrays (no ``Var`` among the inputs) skips recording and
returns a plain array, which is how inference runs without a tape.

Cholesky solve, log-determinant and the quadratic form ``b^T A^-1 b`` are
primitives with their own adjoints instead of compositions.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .gaussian import cholesky_lower

__all__ = [
    "Tape",
    "Var",
    "add",
    "backward",
    "check_gradients",
    "cho_solve",
    "concat",
    "linear",
    "logdet",
    "matmul",
    "mul",
    "quad_form",
    "reshape",
    "scale",
    "sigmoid",
    "slice_",
    "softplus",
    "sub",
    "sum_",
    "symmetrize",
    "tanh",
    "transpose",
    "value_of",
]


class Var:
    """A node on a tape: cached forward value plus its record index."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 100.0

    def __init__(self, value: np.ndarray, tape: Tape, index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.shape}, index={self.index})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of primitive applications.

    Each record holds the output index, the indices of its ``Var`` inputs
    (``None`` for constants) and a closure mapping the output adjoint to
    input adjoints. Records are appended in evaluation order, so the list
    is topologically sorted by construction.
    """

    def __init__(self):
        self._records: list[tuple[tuple[int | None, ...], Callable]] = []
        self._shapes: list[tuple[int, ...]] = []
        self._leaves: list[int] = []

    def __len__(self):
        return len(self._records)

    def leaf(self, value) -> Var:
        """Register a differentiable input (a parameter)."""
        value = np.array(value, dtype=float)
        var = self._append(value, (), None)
        self._leaves.append(var.index)
        return var

    def record(self, primitive: str, *inputs, **kwargs):
        """Apply the named primitive to ``inputs`` and record it on this tape."""
        try:
            fn = PRIMITIVES[primitive]
        except KeyError:
            raise ValueError(f"unknown primitive {primitive!r}") from None
        if not any(isinstance(x, Var) and x.tape is self for x in _flatten(inputs)):
            raise ValueError("record() needs at least one input living on this tape")
        return fn(*inputs, **kwargs)

    def _append(self, value, parents, fn) -> Var:
        self._records.append((parents, fn))
        self._shapes.append(value.shape)
        return Var(value, self, len(self._records) - 1)

    def backward(self, root: Var) -> Gradients:
        """Adjoints of the scalar ``root`` with respect to every leaf."""
        if root.tape is not self:
            raise ValueError("root does not belong to this tape")
        if root.value.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        adjoints: list[np.ndarray | None] = [None] * len(self._records)
        adjoints[root.index] = np.ones(root.shape)
        for i in range(root.index, -1, -1):
            g = adjoints[i]
            if g is None:
                continue
            parents, fn = self._records[i]
            if fn is None:
                continue
            for p, gp in zip(parents, fn(g)):
                if p is None or gp is None:
                    continue
                adjoints[p] = gp if adjoints[p] is None else adjoints[p] + gp
        grads = {}
        for i in self._leaves:
            g = adjoints[i]
            grads[i] = np.zeros(self._shapes[i]) if g is None else g
        return Gradients(grads)


class Gradients(Mapping):
    """Leaf adjoints, indexable by the leaf ``Var`` itself."""

    def __init__(self, by_index: dict[int, np.ndarray]):
        self._by_index = by_index

    def __getitem__(self, var: Var) -> np.ndarray:
        return self._by_index[var.index]

    def __iter__(self):
        return iter(self._by_index)

    def __len__(self):
        return len(self._by_index)


def backward(tape: Tape, root: Var) -> Gradients:
    return tape.backward(root)


def _flatten(items):
    for x in items:
        if isinstance(x, (list, tuple)):
            yield from _flatten(x)
        else:
            yield x


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("inputs live on different tapes")
    return tape


def _idx(x):
    return x.index if isinstance(x, Var) else None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _mT(a):
    return np.swapaxes(a, -1, -2)


# elementwise arithmetic


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    _broadcast_shape(av, bv, "add")
    out = av + bv
    if tape is None:
        return out
    sa, sb = av.shape, bv.shape
    return tape._append(out, (_idx(a), _idx(b)), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    _broadcast_shape(av, bv, "sub")
    out = av - bv
    if tape is None:
        return out
    sa, sb = av.shape, bv.shape
    return tape._append(out, (_idx(a), _idx(b)), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    _broadcast_shape(av, bv, "mul")
    out = av * bv
    if tape is None:
        return out
    return tape._append(
        out,
        (_idx(a), _idx(b)),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a, c: float):
    tape = _tape_of(a)
    out = value_of(a) * c
    if tape is None:
        return out
    return tape._append(out, (_idx(a),), lambda g: (g * c,))


def tanh(a):
    tape = _tape_of(a)
    out = np.tanh(value_of(a))
    if tape is None:
        return out
    return tape._append(out, (_idx(a),), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    tape = _tape_of(a)
    out = _sigmoid(value_of(a))
    if tape is None:
        return out
    return tape._append(out, (_idx(a),), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    tape = _tape_of(a)
    av = value_of(a)
    out = np.logaddexp(0.0, av)
    if tape is None:
        return out
    return tape._append(out, (_idx(a),), lambda g: (g * _sigmoid(av),))


# structural


def transpose(a):
    tape = _tape_of(a)
    out = _mT(value_of(a))
    if tape is None:
        return out
    return tape._append(out, (_idx(a),), lambda g: (_mT(g),))


def reshape(a, shape):
    tape = _tape_of(a)
    av = value_of(a)
    out = av.reshape(shape)
    if tape is None:
        return out
    return tape._append(out, (_idx(a),), lambda g: (g.reshape(av.shape),))


def slice_(a, idx):
    """Basic (non-fancy) indexing."""
    tape = _tape_of(a)
    av = value_of(a)
    out = av[idx]
    if tape is None:
        return out

    def back(g):
        full = np.zeros(av.shape)
        full[idx] = g
        return (full,)

    return tape._append(out, (_idx(a),), back)


def concat(items, axis: int = -1):
    tape = _tape_of(*items)
    vals = [value_of(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tape._append(
        out,
        tuple(_idx(x) for x in items),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def sum_(a):
    """Sum of all entries, returned with shape ``(1, 1)``."""
    tape = _tape_of(a)
    av = value_of(a)
    out = np.full((1, 1), av.sum())
    if tape is None:
        return out
    return tape._append(out, (_idx(a),), lambda g: (np.full(av.shape, g.item()),))


def symmetrize(a):
    tape = _tape_of(a)
    av = value_of(a)
    out = 0.5 * (av + _mT(av))
    if tape is None:
        return out
    return tape._append(out, (_idx(a),), lambda g: (0.5 * (g + _mT(g)),))


# linear algebra


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {av.shape} @ {bv.shape}")
    out = av @ bv
    if tape is None:
        return out
    return tape._append(
        out,
        (_idx(a), _idx(b)),
        lambda g: (
            _unbroadcast(g @ _mT(bv), av.shape) if isinstance(a, Var) else None,
            _unbroadcast(_mT(av) @ g, bv.shape) if isinstance(b, Var) else None,
        ),
    )


def linear(x, W, b):
    """Affine map on row vectors: ``x @ W^T + b`` with ``W`` of shape (out, in)."""
    tape = _tape_of(x, W, b)
    xv, Wv, bv = value_of(x), value_of(W), value_of(b)
    if xv.shape[-1] != Wv.shape[1] or bv.shape != (Wv.shape[0],):
        raise ValueError(f"linear: shapes x {xv.shape}, W {Wv.shape}, b {bv.shape} do not fit")
    out = xv @ Wv.T + bv
    if tape is None:
        return out

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xv.reshape(-1, xv.shape[-1])
        return (g @ Wv, g2.T @ x2, g2.sum(axis=0))

    return tape._append(out, (_idx(x), _idx(W), _idx(b)), back)


def _chol_solve(chol, b):
    return np.linalg.solve(_mT(chol), np.linalg.solve(chol, b))


def cho_solve(a, b):
    """``a^-1 b`` for symmetric positive definite ``a`` via Cholesky."""
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"cho_solve: shapes {av.shape} and {bv.shape} do not fit")
    chol = cholesky_lower(av)
    x = _chol_solve(chol, bv)
    if tape is None:
        return x

    def back(g):
        gb = _chol_solve(chol, g)
        ga = gb @ _mT(x)
        ga = -0.5 * (ga + _mT(ga))
        return (_unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape))

    return tape._append(x, (_idx(a), _idx(b)), back)


def logdet(a):
    """``log det a`` for symmetric positive definite ``a``; shape ``(..., 1, 1)``."""
    tape = _tape_of(a)
    av = value_of(a)
    chol = cholesky_lower(av)
    out = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)[..., None, None]
    if tape is None:
        return out

    def back(g):
        inv = _chol_solve(chol, np.broadcast_to(np.eye(av.shape[-1]), av.shape))
        return (_unbroadcast(g * inv, av.shape),)

    return tape._append(out, (_idx(a),), back)


def quad_form(a, b):
    """``b^T a^-1 b`` for SPD ``a`` and column ``b``; shape ``(..., 1, 1)``."""
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if bv.shape[-1] != 1 or av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"quad_form: shapes {av.shape} and {bv.shape} do not fit")
    chol = cholesky_lower(av)
    z = np.linalg.solve(chol, bv)
    out = _mT(z) @ z
    if tape is None:
        return out

    def back(g):
        x = np.linalg.solve(_mT(chol), z)
        gb = 2.0 * g * x
        ga = -g * (x @ _mT(x))
        return (_unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape))

    return tape._append(out, (_idx(a), _idx(b)), back)


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "transpose": transpose,
    "reshape": reshape,
    "slice": slice_,
    "concat": concat,
    "sum": sum_,
    "symmetrize": symmetrize,
    "matmul": matmul,
    "linear": linear,
    "cho_solve": cho_solve,
    "logdet": logdet,
    "quad_form": quad_form,
}


def check_gradients(
    loss_fn: Callable[[dict], object],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-3,
) -> float:
    """Worst relative gap between taped and finite-difference gradients.

    ``loss_fn`` receives a dict with the same keys as ``params`` whose
    values are either leaf ``Var`` objects (taped run) or plain arrays
    (finite-difference runs), and must return a scalar. Numeric
    derivatives use the fourth-order five-point stencil, which keeps both
    truncation and rounding error far below the gradients of interest.
    The relative error of each coordinate uses
    ``max(|analytic|, |numeric|, 1e-8)`` as the denominator.
    """
    base = {k: np.array(v, dtype=float) for k, v in params.items()}
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in base.items()}
    root = loss_fn(leaves)
    grads = tape.backward(root)

    def at() -> float:
        return float(np.asarray(value_of(loss_fn(base))).reshape(-1)[0])

    worst = 0.0
    for name, value in base.items():
        analytic = grads[leaves[name]]
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            samples = []
            for step in (2.0, 1.0, -1.0, -2.0):
                flat[i] = orig + step * epsilon
                samples.append(at())
            flat[i] = orig
            f2, f1, m1, m2 = samples
            numeric = (-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * epsilon)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
