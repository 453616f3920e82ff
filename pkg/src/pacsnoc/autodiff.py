"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Var` wraps an ndarray and remembers how it was produced. Calling
:func:`backward` on a scalar output walks the recorded graph in reverse
topological order and accumulates adjoints into ``.grad``.

Every op in this module also accepts plain ndarrays (or floats) and then
returns a plain ndarray, so model code written against these functions runs
unchanged with or without a tape.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Var", "backward", "value_and_grad", "value", "is_var",
    "tanh", "relu", "exp", "log", "sqrt", "abs", "square", "reciprocal",
    "sum", "mean", "matmul", "concat", "stack", "reshape", "where",
    "clip", "spectral_norm", "minimum_of",
]

class Var:
    """Node of the computation graph."""

    __slots__ = ("value", "grad", "parents")
    # keep numpy from broadcasting ndarray <op> Var into object arrays
    __array_ufunc__ = None

    def __init__(self, value, parents: tuple = ()):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents  # tuple of (Var, vjp) pairs

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return _transpose(self)

    def __repr__(self):
        return f"Var({self.value!r})"

    def __len__(self):
        return len(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return mul(self, reciprocal(other))

    def __rtruediv__(self, other):
        return mul(other, reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        if p == -2:
            return reciprocal(square(self))
        if p == -1:
            return reciprocal(self)
        if p == 0.5:
            return sqrt(self)
        raise NotImplementedError(f"power {p}")

    def __getitem__(self, idx):
        return _getitem(self, idx)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value(x):
    """Strip the tape: the underlying ndarray (or the input itself)."""
    return x.value if isinstance(x, Var) else x


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _node(val, *pairs):
    """Build a Var from its value and (input, vjp) pairs, dropping constants."""
    parents = tuple((p, f) for p, f in pairs if isinstance(p, Var))
    if not parents:
        return val
    return Var(val, parents)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    va, vb = value(a), value(b)
    out = va + vb
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return _node(out, (a, lambda g: _unbroadcast(g, sa)),
                 (b, lambda g: _unbroadcast(g, sb)))


def neg(a):
    if not isinstance(a, Var):
        return -np.asarray(a, dtype=float)
    return Var(-a.value, ((a, lambda g: -g),))


def mul(a, b):
    va, vb = value(a), value(b)
    out = va * vb
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return _node(out, (a, lambda g: _unbroadcast(g * vb, sa)),
                 (b, lambda g: _unbroadcast(g * va, sb)))


def reciprocal(a):
    va = value(a)
    out = 1.0 / va
    if not isinstance(a, Var):
        return out
    return Var(out, ((a, lambda g: -g * out * out),))


def square(a):
    va = value(a)
    out = va * va
    if not isinstance(a, Var):
        return out
    return Var(out, ((a, lambda g: 2.0 * g * va),))


def tanh(a):
    out = np.tanh(value(a))
    if not isinstance(a, Var):
        return out
    return Var(out, ((a, lambda g: g * (1.0 - out * out)),))


def relu(a):
    va = value(a)
    out = np.maximum(va, 0.0)
    if not isinstance(a, Var):
        return out
    return Var(out, ((a, lambda g: g * (va > 0)),))


def exp(a):
    out = np.exp(value(a))
    if not isinstance(a, Var):
        return out
    return Var(out, ((a, lambda g: g * out),))


def log(a):
    va = value(a)
    out = np.log(va)
    if not isinstance(a, Var):
        return out
    return Var(out, ((a, lambda g: g / va),))


def sqrt(a):
    out = np.sqrt(value(a))
    if not isinstance(a, Var):
        return out
    return Var(out, ((a, lambda g: g * 0.5 / out),))


def abs(a):  # noqa: A001 - mirrors numpy naming
    va = value(a)
    out = np.abs(va)
    if not isinstance(a, Var):
        return out
    return Var(out, ((a, lambda g: g * np.sign(va)),))


def clip(a, lo: float, hi: float):
    """Clamp; the adjoint is zero on the clamped pieces."""
    va = value(a)
    out = np.clip(va, lo, hi)
    if not isinstance(a, Var):
        return out
    inside = (va >= lo) & (va <= hi)
    return Var(out, ((a, lambda g: g * inside),))


def where(mask, a, b):
    """Select ``a`` where ``mask`` else ``b``; ``mask`` is treated as constant."""
    mask = np.asarray(mask, dtype=bool)
    va, vb = value(a), value(b)
    out = np.where(mask, va, vb)
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return _node(out, (a, lambda g: _unbroadcast(np.where(mask, g, 0.0), sa)),
                 (b, lambda g: _unbroadcast(np.where(mask, 0.0, g), sb)))


# ---------------------------------------------------------------- reductions

def sum(a, axis=None):  # noqa: A001
    va = value(a)
    out = np.sum(va, axis=axis)
    if not isinstance(a, Var):
        return out
    shape = va.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Var(out, ((a, vjp),))


def mean(a, axis=None):
    va = value(a)
    n = va.size if axis is None else va.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    va, vb = value(a), value(b)
    out = va @ vb
    if not (isinstance(a, Var) or isinstance(b, Var)):
        return out

    def vjp_a(g):
        if vb.ndim == 1:
            return np.multiply.outer(g, vb) if va.ndim > 1 else g * vb
        if va.ndim == 1:
            return vb @ g
        return g @ np.swapaxes(vb, -1, -2)

    def vjp_b(g):
        if va.ndim == 1:
            return np.multiply.outer(va, g) if vb.ndim > 1 else g * va
        if vb.ndim == 1:
            return np.tensordot(va, g, axes=(tuple(range(va.ndim - 1)), tuple(range(g.ndim))))
        a2 = va.reshape(-1, va.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return a2.T @ g2

    return _node(out, (a, vjp_a), (b, vjp_b))


def _transpose(a):
    if not isinstance(a, Var):
        return np.asarray(a).T
    return Var(a.value.T, ((a, lambda g: g.T),))


def spectral_norm(a):
    """Largest singular value; adjoint ``u1 v1^T`` (a subgradient at ties)."""
    va = value(a)
    if va.size == 0:
        return np.float64(0.0)
    u, s, vt = np.linalg.svd(va)
    out = s[0]
    if not isinstance(a, Var):
        return out
    outer = np.outer(u[:, 0], vt[0])
    return Var(out, ((a, lambda g: g * outer),))


def minimum_of(*args):
    """Smallest of several scalars; the adjoint flows to the active one only."""
    vals = [float(value(x)) for x in args]
    i = int(np.argmin(vals))
    return args[i]


# ---------------------------------------------------------------- shaping

def _getitem(a, idx):
    out = a.value[idx]
    shape = a.value.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return full

    return Var(out, ((a, vjp),))


def reshape(a, shape):
    va = value(a)
    out = np.reshape(va, shape)
    if not isinstance(a, Var):
        return out
    orig = va.shape
    return Var(out, ((a, lambda g: np.reshape(g, orig)),))


def concat(items: Sequence, axis: int = -1):
    vals = [np.asarray(value(x), dtype=float) for x in items]
    out = np.concatenate(vals, axis=axis)
    if not any(isinstance(x, Var) for x in items):
        return out
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    pairs = []
    for i, x in enumerate(items):
        pairs.append((x, (lambda i: lambda g: np.split(g, sizes, axis=axis)[i])(i)))
    return _node(out, *pairs)


def stack(items: Sequence, axis: int = 0):
    vals = [np.asarray(value(x), dtype=float) for x in items]
    out = np.stack(vals, axis=axis)
    if not any(isinstance(x, Var) for x in items):
        return out
    pairs = []
    for i, x in enumerate(items):
        pairs.append((x, (lambda i: lambda g: np.take(g, i, axis=axis))(i)))
    return _node(out, *pairs)


# ---------------------------------------------------------------- backprop

def _toposort(root: Var) -> list[Var]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(out: Var) -> None:
    """Accumulate d(out)/d(node) into ``.grad`` for every ancestor of ``out``."""
    if np.size(out.value) != 1:
        raise ValueError("backward() needs a scalar output")
    order = _toposort(out)
    grads = {id(out): np.ones_like(out.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib


def value_and_grad(fn: Callable, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Evaluate scalar ``fn(x)`` and its gradient with respect to ``x``."""
    xv = Var(np.array(x, dtype=float))
    out = fn(xv)
    if not isinstance(out, Var):
        return float(out), np.zeros_like(xv.value)
    backward(out)
    g = xv.grad if xv.grad is not None else np.zeros_like(xv.value)
    return float(out.value), g
