"""Minimal reverse-mode differentiation on numpy arrays.

A ``Var`` wraps a float64 array (0-d for scalars) and remembers how it was
produced.  The op functions in this module are polymorphic: given plain
numbers/arrays they return plain values computed by the exact same kernels,
given at least one ``Var`` they return a ``Var`` carrying the backward
closure.  That lets the model code be written once and serve three callers:
tape-building training passes, tape-free evaluation passes, and the
finite-difference oracle (which must see bit-identical forward values).

Gradient conventions: ``max`` routes its gradient to the lowest tied index
only; broadcasting gradients are summed back to the parent's shape.
"""

from __future__ import annotations

import numpy as np

from . import numerics


class Var:
    """One node of the reverse-mode tape."""

    __slots__ = ("value", "grad", "_parents", "_vjp")
    __array_ufunc__ = None  # keep numpy from consuming `ndarray <op> Var`

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def _accum(self, g):
        self.grad = g if self.grad is None else self.grad + g

    # arithmetic sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __repr__(self):
        return f"Var({self.value!r})"


def value_of(x) -> np.ndarray:
    """Underlying float64 value of a Var, array, or scalar."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def is_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _node(value, parents, vjp) -> Var:
    return Var(value, tuple(p for p in parents if isinstance(p, Var)), vjp)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g back down to `shape` after a broadcasting forward op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not is_var(a, b):
        return out

    def vjp(g):
        if isinstance(a, Var):
            a._accum(_unbroadcast(g, av.shape))
        if isinstance(b, Var):
            b._accum(_unbroadcast(g, bv.shape))

    return _node(out, (a, b), vjp)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not is_var(a, b):
        return out

    def vjp(g):
        if isinstance(a, Var):
            a._accum(_unbroadcast(g * bv, av.shape))
        if isinstance(b, Var):
            b._accum(_unbroadcast(g * av, bv.shape))

    return _node(out, (a, b), vjp)


def matvec(M, x):
    """M @ x for a 2-D M and 1-D x."""
    Mv, xv = value_of(M), value_of(x)
    if Mv.shape[1] != xv.shape[0]:
        raise numerics.DimensionError(f"matvec: matrix is {Mv.shape}, vector has dim {xv.shape[0]}")
    out = Mv @ xv
    if not is_var(M, x):
        return out

    def vjp(g):
        if isinstance(M, Var):
            M._accum(np.outer(g, xv))
        if isinstance(x, Var):
            x._accum(Mv.T @ g)

    return _node(out, (M, x), vjp)


def rmatvec(M, x):
    """M.T @ x — maps an input-space vector through a (input-dim, out-dim) matrix."""
    Mv, xv = value_of(M), value_of(x)
    if Mv.shape[0] != xv.shape[0]:
        raise numerics.DimensionError(f"rmatvec: matrix is {Mv.shape}, vector has dim {xv.shape[0]}")
    out = Mv.T @ xv
    if not is_var(M, x):
        return out

    def vjp(g):
        if isinstance(M, Var):
            M._accum(np.outer(xv, g))
        if isinstance(x, Var):
            x._accum(Mv @ g)

    return _node(out, (M, x), vjp)


def dot(x, y):
    xv, yv = value_of(x), value_of(y)
    if xv.shape != yv.shape:
        raise numerics.DimensionError(f"dot: dims {xv.shape} vs {yv.shape}")
    out = xv @ yv
    if not is_var(x, y):
        return out

    def vjp(g):
        if isinstance(x, Var):
            x._accum(g * yv)
        if isinstance(y, Var):
            y._accum(g * xv)

    return _node(out, (x, y), vjp)


def outer(z, u):
    zv, uv = value_of(z), value_of(u)
    out = np.outer(zv, uv)
    if not is_var(z, u):
        return out

    def vjp(g):
        if isinstance(z, Var):
            z._accum(g @ uv)
        if isinstance(u, Var):
            u._accum(g.T @ zv)

    return _node(out, (z, u), vjp)


def softmax(s):
    sv = value_of(s)
    out = numerics.softmax(sv)
    if not is_var(s):
        return out

    def vjp(g):
        s._accum(out * (g - g @ out))

    return _node(out, (s,), vjp)


def sigmoid(x):
    xv = value_of(x)
    out = np.asarray(numerics.sigmoid(xv), dtype=np.float64)
    if not is_var(x):
        return out

    def vjp(g):
        x._accum(g * out * (1.0 - out))

    return _node(out, (x,), vjp)


def vmax(s):
    """Maximum of a vector; subgradient flows to the lowest tied index."""
    sv = value_of(s)
    idx = int(np.argmax(sv))
    out = sv[idx]
    if not is_var(s):
        return out

    def vjp(g):
        gs = np.zeros_like(sv)
        gs[idx] = g
        s._accum(gs)

    return _node(out, (s,), vjp)


def concat(parts):
    """Concatenate 1-D pieces (0-d scalars count as length-1)."""
    vals = [np.atleast_1d(value_of(p)) for p in parts]
    out = np.concatenate(vals)
    if not is_var(*parts):
        return out

    sizes = [v.shape[0] for v in vals]

    def vjp(g):
        pos = 0
        for p, n in zip(parts, sizes):
            if isinstance(p, Var):
                piece = g[pos:pos + n]
                p._accum(piece.reshape(p.value.shape))
            pos += n

    return _node(out, tuple(parts), vjp)


def stack_rows(rows):
    """Stack 1-D vectors into a matrix, one per row."""
    vals = [value_of(r) for r in rows]
    out = np.stack(vals)
    if not is_var(*rows):
        return out

    def vjp(g):
        for i, r in enumerate(rows):
            if isinstance(r, Var):
                r._accum(g[i])

    return _node(out, tuple(rows), vjp)


def as_row_matrix(u):
    uv = value_of(u)
    out = uv[None, :].copy()
    if not is_var(u):
        return out

    def vjp(g):
        u._accum(g[0])

    return _node(out, (u,), vjp)


def append_zero_row(E):
    Ev = value_of(E)
    out = np.vstack([Ev, np.zeros((1, Ev.shape[1]))])
    if not is_var(E):
        return out

    def vjp(g):
        E._accum(g[:-1])

    return _node(out, (E,), vjp)


def pick(x, i: int):
    xv = value_of(x)
    out = xv[i]
    if not is_var(x):
        return out

    def vjp(g):
        gx = np.zeros_like(xv)
        gx[i] = g
        x._accum(gx)

    return _node(out, (x,), vjp)


def log(x):
    xv = value_of(x)
    out = np.log(xv)
    if not is_var(x):
        return out

    def vjp(g):
        x._accum(g / xv)

    return _node(out, (x,), vjp)


def cross_entropy(scores, gold: int):
    """−log softmax(scores)[gold], fused for stability.

    Backward yields the classic (softmax − onehot) gradient on the scores.
    """
    sv = value_of(scores)
    p = numerics.softmax(sv)
    shifted = sv - sv.max()
    out = np.log(np.exp(shifted).sum()) - shifted[gold]
    if not is_var(scores):
        return out

    def vjp(g):
        gs = p.copy()
        gs[gold] -= 1.0
        scores._accum(g * gs)

    return _node(out, (scores,), vjp)


def backward(root: Var):
    """Accumulate d(root)/d(leaf) into .grad over the whole tape."""
    if not isinstance(root, Var):
        raise TypeError("backward needs a Var root (was this a tape-free forward pass?)")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)
