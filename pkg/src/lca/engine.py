"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (float32 by default, float64 in check
mode) and record the op graph as they are produced.  ``backward`` walks the
recorded graph once in reverse topological order, so gradients are
deterministic: identical graphs give bit-identical gradients.

Values are validated for finiteness after every op; NaN/Inf anywhere is an
error state, never silently propagated.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_CHECK_FINITE = True


def current_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype: str):
    """Temporarily switch the engine dtype ("float32" or "float64").

    Float64 is the opt-in check mode used by gradient tests; training and
    inference run in float32.
    """
    global _DTYPE
    prev = _DTYPE
    _DTYPE = {"float32": np.float32, "float64": np.float64}[dtype]
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


class EngineError(Exception):
    pass


class NonFiniteError(EngineError):
    pass


def _as_array(x) -> np.ndarray:
    a = np.asarray(x, dtype=_DTYPE)
    return a


def _check(a: np.ndarray, what: str = "tensor"):
    if _CHECK_FINITE and not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values in {what}")
    return a


class Tensor:
    """A dense array plus the backward closure that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None,
                 name: str | None = None):
        self.data = _check(_as_array(data))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = tuple(parents)
        self._backward: Callable | None = backward
        self.name = name

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}{tag})"

    # -- graph plumbing ------------------------------------------------------
    def _accum(self, g: np.ndarray):
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        return mul(self, pow(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_wrap(other), pow(self, -1.0))

    def __pow__(self, p):
        return pow(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def backward(self):
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _needs(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._backward is not None for t in ts)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable,
            name: str | None = None) -> Tensor:
    """Build a graph node from a custom primitive.

    ``backward`` receives the output gradient and must call ``t._accum`` on
    each parent it contributes to.  Used by composite primitives (rasterizer,
    convolution) whose adjoints are hand-derived.
    """
    if not _needs(*parents):
        return Tensor(data, name=name)
    return Tensor(data, parents=parents, backward=backward, name=name)


# -- primitive ops -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def bwd(g):
        a._accum(_unbroadcast(g, a.data.shape))
        b._accum(_unbroadcast(g, b.data.shape))

    return make_op(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def bwd(g):
        a._accum(_unbroadcast(g * b.data, a.data.shape))
        b._accum(_unbroadcast(g * a.data, b.data.shape))

    return make_op(out_data, (a, b), bwd)


def pow(a, p: float) -> Tensor:
    a = _wrap(a)
    out_data = a.data ** p

    def bwd(g):
        a._accum(g * p * a.data ** (p - 1.0))

    return make_op(out_data, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data @ b.data

    def bwd(g):
        if b.data.ndim == 1:
            ga = np.outer(g, b.data) if a.data.ndim == 2 else g[..., None] * b.data
            gb = a.data.T @ g if a.data.ndim == 2 else (a.data * g[..., None]).sum(
                axis=tuple(range(a.data.ndim - 1)))
        elif a.data.ndim == 1:
            ga = g @ b.data.swapaxes(-1, -2)
            gb = np.outer(a.data, g)
        else:
            ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
            gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        a._accum(ga)
        b._accum(gb)

    return make_op(out_data, (a, b), bwd)


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def bwd(g):
        a._accum(g * out_data)

    return make_op(out_data, (a,), bwd)


def log(a) -> Tensor:
    a = _wrap(a)
    out_data = np.log(a.data)

    def bwd(g):
        a._accum(g / a.data)

    return make_op(out_data, (a,), bwd)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        a._accum(g * 0.5 / out_data)

    return make_op(out_data, (a,), bwd)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out_data = np.tanh(a.data)

    def bwd(g):
        a._accum(g * (1.0 - out_data * out_data))

    return make_op(out_data, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        a._accum(g * out_data * (1.0 - out_data))

    return make_op(out_data, (a,), bwd)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, slope * a.data)

    def bwd(g):
        a._accum(g * np.where(mask, 1.0, slope))

    return make_op(out_data, (a,), bwd)


def gelu(a) -> Tensor:
    """tanh-approximation GELU; exact enough and cheap to differentiate."""
    a = _wrap(a)
    c = np.sqrt(2.0 / np.pi).astype(a.data.dtype)
    inner = tanh(mul(add(a, mul(pow(a, 3.0), 0.044715)), c))
    return mul(mul(a, 0.5), add(inner, 1.0))


def abs_(a) -> Tensor:
    a = _wrap(a)
    sign = np.sign(a.data)
    out_data = np.abs(a.data)

    def bwd(g):
        a._accum(g * sign)

    return make_op(out_data, (a,), bwd)


def maximum(a, const: float) -> Tensor:
    """Elementwise max with a constant (hinge); gradient is the active mask."""
    a = _wrap(a)
    mask = a.data > const
    out_data = np.where(mask, a.data, const)

    def bwd(g):
        a._accum(g * mask)

    return make_op(out_data, (a,), bwd)


def minimum(a, const: float) -> Tensor:
    a = _wrap(a)
    mask = a.data < const
    out_data = np.where(mask, a.data, const)

    def bwd(g):
        a._accum(g * mask)

    return make_op(out_data, (a,), bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    return minimum(maximum(a, lo), hi)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(i % a.data.ndim for i in ax)
            for i in sorted(ax):
                g = np.expand_dims(g, i)
        a._accum(np.broadcast_to(g, a.data.shape))

    return make_op(out_data, (a,), bwd)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[i % a.data.ndim] for i in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out_data = a.data.reshape(shape)

    def bwd(g):
        a._accum(g.reshape(a.data.shape))

    return make_op(out_data, (a,), bwd)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    out_data = a.data.transpose(axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        a._accum(g.transpose(inv))

    return make_op(out_data, (a,), bwd)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)
    out_data = a.data.swapaxes(ax1, ax2)

    def bwd(g):
        a._accum(g.swapaxes(ax1, ax2))

    return make_op(out_data, (a,), bwd)


def getitem(a, idx) -> Tensor:
    a = _wrap(a)
    out_data = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, np.asarray(g).reshape(np.shape(out_data)))
        a._accum(full)

    return make_op(np.ascontiguousarray(out_data), (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accum(g[tuple(sl)])

    return make_op(out_data, tensors, bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        for i, t in enumerate(tensors):
            t._accum(np.take(g, i, axis=axis))

    return make_op(out_data, tensors, bwd)


def softmax(a, axis: int = -1) -> Tensor:
    # Shift by the (detached) max: softmax is shift-invariant, so the
    # composed gradient is exact.
    a = _wrap(a)
    shifted = add(a, Tensor(-a.data.max(axis=axis, keepdims=True)))
    e = exp(shifted)
    return mul(e, pow(sum_(e, axis=axis, keepdims=True), -1.0))


def layer_norm(a, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = mean(a, axis=-1, keepdims=True)
    centered = add(a, mul(mu, -1.0))
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = pow(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gain), bias)


# -- backward pass -----------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate gradients of ``loss`` into every reachable tensor's .grad.

    ``loss`` must be a scalar; each graph node's adjoint is applied exactly
    once, in reverse topological order.
    """
    if loss.data.size != 1:
        raise EngineError(f"backward expects a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            _check(node.grad, "gradient")
            node._backward(node.grad)


def gradients(loss: Tensor, params: Iterable[Tensor]) -> dict[int, np.ndarray]:
    """Gradient map for ``params``; unreachable parameters get zero gradients."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss)
    return {id(p): (p.grad if p.grad is not None else np.zeros_like(p.data))
            for p in params}


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None
