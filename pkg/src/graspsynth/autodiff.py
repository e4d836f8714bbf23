"""Minimal reverse-mode automatic differentiation on numpy arrays.

A Node wraps a float64 ndarray plus the vector-Jacobian callbacks of the
op that produced it. Graphs are built eagerly; creation order doubles as
the topological order, so backward() is a single reverse sweep. Only the
ops needed by the grasp losses, forward kinematics, chamfer gathers, and
the dense encoder/decoder stacks are provided. Constants stay plain
ndarrays and never record gradients.

Subgradient conventions (frozen so finite differences agree away from the
kinks): max/min reductions route the gradient to the first winning index,
elementwise maximum/minimum route ties to the first argument, and relu
has zero slope at exactly zero.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import transforms

_ORDER = itertools.count()


class Node:
    __slots__ = ("value", "_parents", "_vjps", "_order")

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self._parents = parents
        self._vjps = vjps
        self._order = next(_ORDER)

    @property
    def shape(self):
        return self.value.shape

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def leaf(value) -> Node:
    """Differentiable input (parameter or optimization variable)."""
    return Node(np.array(value, dtype=np.float64))


def val(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(value, ins, vjps) -> Node:
    """Record vjps only for Node inputs; constants drop out of the graph."""
    parents = []
    kept = []
    for x, fn in zip(ins, vjps):
        if isinstance(x, Node):
            parents.append(x)
            kept.append(fn)
    return Node(value, tuple(parents), tuple(kept))


def add(a, b):
    va, vb = val(a), val(b)
    out = va + vb
    return _make(out, (a, b), (
        lambda g: _unbroadcast(g, va.shape),
        lambda g: _unbroadcast(g, vb.shape),
    ))


def sub(a, b):
    va, vb = val(a), val(b)
    out = va - vb
    return _make(out, (a, b), (
        lambda g: _unbroadcast(g, va.shape),
        lambda g: _unbroadcast(-g, vb.shape),
    ))


def mul(a, b):
    va, vb = val(a), val(b)
    return _make(va * vb, (a, b), (
        lambda g: _unbroadcast(g * vb, va.shape),
        lambda g: _unbroadcast(g * va, vb.shape),
    ))


def div(a, b):
    va, vb = val(a), val(b)
    return _make(va / vb, (a, b), (
        lambda g: _unbroadcast(g / vb, va.shape),
        lambda g: _unbroadcast(-g * va / (vb * vb), vb.shape),
    ))


def neg(a):
    return _make(-val(a), (a,), (lambda g: -g,))


def matmul(a, b):
    va, vb = val(a), val(b)
    if va.ndim < 2 or vb.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")
    out = va @ vb
    return _make(out, (a, b), (
        lambda g: _unbroadcast(g @ vb.swapaxes(-1, -2), va.shape),
        lambda g: _unbroadcast(va.swapaxes(-1, -2) @ g, vb.shape),
    ))


def _restore_axis(g, axis, keepdims, shape):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def asum(a, axis=None, keepdims=False):
    va = val(a)
    out = va.sum(axis=axis, keepdims=keepdims)
    return _make(out, (a,), (
        lambda g: _restore_axis(np.asarray(g), axis, keepdims, va.shape).copy(),
    ))


def amean(a, axis=None, keepdims=False):
    va = val(a)
    out = va.mean(axis=axis, keepdims=keepdims)
    count = va.size if axis is None else va.shape[axis]
    return _make(out, (a,), (
        lambda g: _restore_axis(np.asarray(g) / count, axis, keepdims, va.shape).copy(),
    ))


def amax(a, axis, keepdims=False):
    va = val(a)
    idx = np.argmax(va, axis=axis)  # first winner on ties
    out = np.take_along_axis(va, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        buf = np.zeros_like(va)
        np.put_along_axis(buf, np.expand_dims(idx, axis), g, axis=axis)
        return buf

    return _make(out, (a,), (vjp,))


def amin(a, axis, keepdims=False):
    return neg(amax(neg(a), axis=axis, keepdims=keepdims))


def maximum(a, b):
    va, vb = val(a), val(b)
    mask = va >= vb
    return _make(np.maximum(va, vb), (a, b), (
        lambda g: _unbroadcast(g * mask, va.shape),
        lambda g: _unbroadcast(g * ~mask, vb.shape),
    ))


def minimum(a, b):
    va, vb = val(a), val(b)
    mask = va <= vb
    return _make(np.minimum(va, vb), (a, b), (
        lambda g: _unbroadcast(g * mask, va.shape),
        lambda g: _unbroadcast(g * ~mask, vb.shape),
    ))


def relu(a):
    va = val(a)
    mask = va > 0.0
    return _make(va * mask, (a,), (lambda g: g * mask,))


def square(a):
    va = val(a)
    return _make(va * va, (a,), (lambda g: g * 2.0 * va,))


def sqrt(a):
    out = np.sqrt(val(a))
    return _make(out, (a,), (lambda g: g * 0.5 / out,))


def exp(a):
    out = np.exp(val(a))
    return _make(out, (a,), (lambda g: g * out,))


def log(a):
    va = val(a)
    return _make(np.log(va), (a,), (lambda g: g / va,))


def tanh(a):
    out = np.tanh(val(a))
    return _make(out, (a,), (lambda g: g * (1.0 - out * out),))


def sin(a):
    va = val(a)
    return _make(np.sin(va), (a,), (lambda g: g * np.cos(va),))


def cos(a):
    va = val(a)
    return _make(np.cos(va), (a,), (lambda g: -g * np.sin(va),))


def reshape(a, shape):
    va = val(a)
    return _make(va.reshape(shape), (a,), (lambda g: g.reshape(va.shape),))


def transpose(a, axes):
    va = val(a)
    inv = np.argsort(axes)
    return _make(va.transpose(axes), (a,), (lambda g: g.transpose(inv),))


def swapaxes(a, ax1, ax2):
    va = val(a)
    return _make(va.swapaxes(ax1, ax2), (a,), (lambda g: g.swapaxes(ax1, ax2),))


def concatenate(parts, axis=0):
    vals = [val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _make(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def stack(parts, axis=0):
    vals = [val(p) for p in parts]
    out = np.stack(vals, axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return _make(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def getitem(a, idx):
    va = val(a)

    def vjp(g):
        buf = np.zeros_like(va)
        np.add.at(buf, idx, g)
        return buf

    return _make(va[idx], (a,), (vjp,))


def take_along(a, indices, axis):
    """Gather with repeat-safe scatter in the backward pass."""
    va = val(a)
    out = np.take_along_axis(va, indices, axis=axis)

    def vjp(g):
        buf = np.zeros_like(va)
        mesh = list(np.indices(indices.shape, sparse=False))
        mesh[axis] = indices
        np.add.at(buf, tuple(mesh), g)
        return buf

    return _make(out, (a,), (vjp,))


def cross(a, b):
    va, vb = val(a), val(b)
    return _make(np.cross(va, vb), (a, b), (
        lambda g: _unbroadcast(np.cross(vb, g), va.shape),
        lambda g: _unbroadcast(np.cross(g, va), vb.shape),
    ))


def so3_a(s):
    vs = val(s)
    d = transforms.so3_coeff_a_deriv(vs)
    return _make(transforms.so3_coeff_a(vs), (s,), (lambda g: g * d,))


def so3_b(s):
    vs = val(s)
    d = transforms.so3_coeff_b_deriv(vs)
    return _make(transforms.so3_coeff_b(vs), (s,), (lambda g: g * d,))


def backward(out: Node, seed=None) -> dict:
    """Reverse sweep from a scalar output.

    Returns {id(node): grad ndarray} for every node reachable from out,
    leaves included. Look up a leaf's gradient as grads[id(leaf)].
    """
    if seed is None:
        if out.value.size != 1:
            raise ValueError("backward() without a seed needs a scalar output")
        seed = np.ones_like(out.value)

    # collect reachable subgraph, then sweep in reverse creation order
    seen = {id(out): out}
    stack_ = [out]
    while stack_:
        node = stack_.pop()
        for p in node._parents:
            if id(p) not in seen:
                seen[id(p)] = p
                stack_.append(p)

    grads = {id(out): np.asarray(seed, dtype=np.float64)}
    for node in sorted(seen.values(), key=lambda n: n._order, reverse=True):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            contrib = vjp(g)
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = np.array(contrib, dtype=np.float64)
            else:
                acc += contrib
    return grads


class Adam:
    """Adam with bias correction over a list of leaves; updates in place."""

    def __init__(self, params, step_size=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.step_size = step_size
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self, grads):
        self.t += 1
        for i, p in enumerate(self.params):
            g = grads[i]
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            m_hat = self.m[i] / (1 - self.b1 ** self.t)
            v_hat = self.v[i] / (1 - self.b2 ** self.t)
            p.value -= self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)
