"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations needed by the control network and the trust-region
losses are provided. Each op records its parents and a closure that pushes
the output gradient back to them; :meth:`Tensor.backward` walks the tape in
reverse topological order.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import _kernels

_GRAD_ENABLED = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        order = _topo(self)
        for node in order:
            if node is not self and node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topo(root):
    order, seen = [], set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording the tape."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    out = Tensor(data)
    if not _GRAD_ENABLED:
        return out
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = live
        out._backward = backward
    return out


def _acc(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: _acc(a, g * c))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T)
        if b.requires_grad:
            _acc(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` for ``x: (N, i)``, ``W: (i, o)``, ``b: (o,)``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"affine: incompatible shapes {x.shape}, {W.shape}, {b.shape}")

    def bw(g):
        if x.requires_grad:
            _acc(x, g @ W.data.T)
        if W.requires_grad:
            _acc(W, x.data.T @ g)
        if b.requires_grad:
            _acc(b, g.sum(axis=0))

    return _make(x.data @ W.data + b.data, (x, W, b), bw)


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    y, dy = _kernels.gelu(x.data, _GRAD_ENABLED and x.requires_grad)
    return _make(y, (x,), lambda g: _acc(x, g * dy))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: _acc(x, 2.0 * g * x.data))


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)

    def bw(g):
        if axis is None:
            _acc(x, np.broadcast_to(g, x.shape).copy())
        else:
            _acc(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _make(np.sum(x.data, axis=axis), (x,), bw)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def sqnorm_rows(x) -> Tensor:
    """Squared Euclidean norm over the last axis."""
    x = as_tensor(x)
    return _make(np.einsum("...i,...i->...", x.data, x.data), (x,), lambda g: _acc(x, 2.0 * g[..., None] * x.data))


def dot_rows(a, b) -> Tensor:
    """Inner product over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"dot_rows: shapes differ {a.shape} vs {b.shape}")

    def bw(g):
        _acc(a, g[..., None] * b.data)
        _acc(b, g[..., None] * a.data)

    return _make(np.einsum("...i,...i->...", a.data, b.data), (a, b), bw)


def var_batch(x) -> Tensor:
    """Population variance (divide by K) of a 1-D tensor."""
    x = as_tensor(x)
    if x.ndim != 1:
        raise ValueError(f"var_batch expects a 1-D tensor, got shape {x.shape}")
    c = x.data - x.data.mean()
    K = x.data.size
    return _make(np.mean(c * c), (x,), lambda g: _acc(x, g * 2.0 * c / K))


def concat(parts, axis=-1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            _acc(p, gp)

    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[p.shape for p in parts]}") from None
    return _make(data, tuple(parts), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: _acc(x, g.reshape(x.shape)))


def take_rows(x, idx) -> Tensor:
    """Gather ``x[idx]`` along the first axis (scatter-add on the way back)."""
    x = as_tensor(x)
    idx = np.asarray(idx)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        _acc(x, out)

    return _make(x.data[idx], (x,), bw)
