"""A small reverse-mode tape over numpy blocks.

Only the operations the objectives need are provided: elementwise sums and
differences, scaling by constants, row-wise squared norms, softplus, mean,
and the dense-network call itself (see :mod:`smpo_lab.denoiser`).
"""

from __future__ import annotations

import numpy as np


class GraphReuseError(RuntimeError):
    """A loss graph was differentiated a second time."""


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def value_of(x):
    return x.value if isinstance(x, Node) else x


class Node:
    __slots__ = ("value", "parents", "backward_fn", "grad")
    # keep numpy from broadcasting over Node objects; defer to our operators
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward_fn=None):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad = None

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __rsub__(self, other):
        return add(other, scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Node):
            return multiply(self, other)
        return scale(self, other)

    __rmul__ = __mul__


def leaf(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64))


def add(a, b):
    if not isinstance(a, Node) and not isinstance(b, Node):
        return a + b
    va, vb = value_of(a), value_of(b)
    out = va + vb
    sa, sb = np.shape(va), np.shape(vb)

    def bw(g):
        return (_unbroadcast(g, sa), _unbroadcast(g, sb))

    return Node(out, (a, b), bw)


def scale(a, c):
    """``a * c`` with ``c`` a constant (scalar or broadcastable array)."""
    if not isinstance(a, Node):
        return a * c
    sa = a.shape
    c = np.asarray(c, dtype=np.float64)
    return Node(a.value * c, (a,), lambda g: (_unbroadcast(g * c, sa),))


def multiply(a, b):
    va, vb = value_of(a), value_of(b)
    sa, sb = np.shape(va), np.shape(vb)

    def bw(g):
        return (_unbroadcast(g * vb, sa), _unbroadcast(g * va, sb))

    return Node(va * vb, (a, b), bw)


def sq_norm_rows(a):
    """Row-wise squared Euclidean norm: ``(B, d) -> (B,)``."""
    if not isinstance(a, Node):
        return np.sum(a * a, axis=-1)
    v = a.value
    return Node(np.sum(v * v, axis=-1), (a,), lambda g: (2.0 * v * g[..., None],))


def softplus(a):
    """``log(1 + exp(a))`` evaluated without overflow."""
    v = value_of(a)
    out = np.logaddexp(0.0, v)
    if not isinstance(a, Node):
        return out
    # exp(a - softplus(a)) is the logistic function, stable for large |a|
    sig = np.exp(v - out)
    return Node(out, (a,), lambda g: (g * sig,))


def mean(a):
    v = value_of(a)
    if not isinstance(a, Node):
        return np.mean(v)
    n = v.size
    shape = v.shape
    return Node(np.mean(v), (a,), lambda g: (np.full(shape, g / n),))


def backprop(root: Node) -> None:
    """Accumulate ``d root / d node`` into ``node.grad`` for every ancestor."""
    order: list[Node] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, Node) and id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for p, g in zip(node.parents, grads):
            if not isinstance(p, Node) or g is None:
                continue
            p.grad = g if p.grad is None else p.grad + g
