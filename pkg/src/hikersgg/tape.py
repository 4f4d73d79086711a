"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations the engine composes are provided. Every op returns a
:class:`Var`; calling :meth:`Var.backward` on a scalar accumulates ``.grad``
on every leaf created with ``requires_grad=True``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, requires_grad: bool = False, parents=(), backward_fn=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.value)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.value.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            pgrads = node.backward_fn(g)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Var) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def leaf(value) -> Var:
    """A trainable leaf."""
    return Var(np.array(value, copy=True), requires_grad=True)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(value, parents, backward_fn) -> Var:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Var(value)
    return Var(value, parents=parents, backward_fn=backward_fn)


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def back(g):
        ga = g @ np.swapaxes(b.value, -1, -2) if b.value.ndim > 1 else np.multiply.outer(g, b.value)
        gb = np.swapaxes(a.value, -1, -2) @ g if a.value.ndim > 1 else np.multiply.outer(a.value, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.value @ b.value, (a, b), back)


def einsum(spec: str, *operands) -> Var:
    """``np.einsum`` restricted to explicit-output specs without repeated indices."""
    ins, out = spec.replace(" ", "").split("->")
    subs = ins.split(",")
    vs = [as_var(x) for x in operands]
    value = np.einsum(spec, *[v.value for v in vs])

    def back(g):
        grads = []
        for i, v in enumerate(vs):
            if not v.requires_grad:
                grads.append(None)
                continue
            others = [s for j, s in enumerate(subs) if j != i]
            available = set(out).union(*others) if others else set(out)
            keep = "".join(c for c in subs[i] if c in available)
            gi = np.einsum(",".join([out] + others) + "->" + keep,
                           g, *[vs[j].value for j in range(len(vs)) if j != i])
            if keep != subs[i]:
                gi = np.expand_dims(gi, [k for k, c in enumerate(subs[i]) if c not in available])
                gi = np.broadcast_to(gi, v.shape).copy()
            grads.append(gi)
        return grads

    return _make(value, vs, back)


def sigmoid(x) -> Var:
    x = as_var(x)
    # branch-free stable logistic
    e = np.exp(-np.abs(x.value))
    s = np.where(x.value >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.value.dtype)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Var:
    x = as_var(x)
    t = np.tanh(x.value)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def relu(x) -> Var:
    x = as_var(x)
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0).astype(x.value.dtype), (x,), lambda g: (g * mask,))


def exp(x) -> Var:
    x = as_var(x)
    e = np.exp(x.value)
    return _make(e, (x,), lambda g: (g * e,))


def log(x, floor: float = 0.0) -> Var:
    """Natural log; with ``floor > 0`` inputs below it are clamped (zero gradient there)."""
    x = as_var(x)
    clamped = x.value < floor
    v = np.log(np.where(clamped, floor, x.value))
    return _make(v, (x,), lambda g: (np.where(clamped, 0.0, g / np.where(clamped, 1.0, x.value)),))


def clamp_min(x, lo: float) -> Var:
    """``max(x, lo)`` with zero gradient where the floor is active."""
    x = as_var(x)
    active = x.value < lo
    return _make(np.where(active, lo, x.value).astype(x.value.dtype), (x,),
                 lambda g: (np.where(active, 0.0, g).astype(g.dtype),))


def sum(x, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    x = as_var(x)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(x.value.sum(axis=axis, keepdims=keepdims), (x,), back)


def reshape(x, shape) -> Var:
    x = as_var(x)
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Var:
    x = as_var(x)
    return _make(x.value.T, (x,), lambda g: (g.T,))


def gather(x, index) -> Var:
    """``x[index]`` along axis 0; ``index`` may be any integer array."""
    x = as_var(x)
    index = np.asarray(index, dtype=np.intp)

    def back(g):
        out = np.zeros_like(x.value)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.value[index], (x,), back)


def pick(x, rows, cols) -> Var:
    """``x[rows, cols]`` for a 2-D ``x``."""
    x = as_var(x)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def back(g):
        out = np.zeros_like(x.value)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _make(x.value[rows, cols], (x,), back)


def spmm(a: sp.spmatrix, x) -> Var:
    """Constant sparse matrix times a dense Var."""
    x = as_var(x)
    at = a.T.tocsr()
    dt = x.value.dtype
    return _make(np.asarray(a @ x.value, dtype=dt), (x,), lambda g: (np.asarray(at @ g, dtype=dt),))


def scatter_add(x, index, n: int) -> Var:
    """Sum rows of ``x`` into ``n`` output rows addressed by ``index``."""
    x = as_var(x)
    index = np.asarray(index, dtype=np.intp)
    out = np.zeros((n,) + x.shape[1:], dtype=x.value.dtype)
    np.add.at(out, index, x.value)
    return _make(out, (x,), lambda g: (g[index],))


def concat(xs: Sequence, axis: int = 0) -> Var:
    vs = [as_var(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vs])[:-1]
    return _make(np.concatenate([v.value for v in vs], axis=axis), vs,
                 lambda g: np.split(g, sizes, axis=axis))


def group_log_softmax(x, groups) -> Var:
    """Log-softmax over the columns of a 2-D ``x`` restricted to each column group.

    ``groups[j]`` is the group id of column ``j``; every group is normalized on
    its own, so each row holds one conditional distribution per group.
    """
    x = as_var(x)
    groups = np.asarray(groups, dtype=np.intp)
    v = x.value
    out = np.empty_like(v)
    members = [np.flatnonzero(groups == k) for k in np.unique(groups)]
    for cols in members:
        block = v[:, cols]
        m = block.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(block - m).sum(axis=1, keepdims=True))
        out[:, cols] = block - lse
    p = np.exp(out)

    def back(g):
        gx = np.empty_like(g)
        for cols in members:
            s = g[:, cols].sum(axis=1, keepdims=True)
            gx[:, cols] = g[:, cols] - p[:, cols] * s
        return (gx,)

    return _make(out, (x,), back)


def log_softmax(x) -> Var:
    x = as_var(x)
    return group_log_softmax(x, np.zeros(x.shape[-1], dtype=np.intp))


def softmax_rows(x) -> Var:
    return exp(log_softmax(x))


def gradients(loss: Var, leaves: dict) -> dict:
    """Run backward on ``loss`` and return ``{name: grad}`` for ``leaves``."""
    for v in leaves.values():
        v.grad = None
    loss.backward()
    return {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in leaves.items()}

