"""Minimal dense tensor with reverse-mode differentiation.

All data is float64. Every operation that involves a tensor with
``requires_grad`` records a :class:`TapeNode` holding its inputs and a
closure computing the vector-Jacobian product. :func:`backward` orders the
reachable nodes topologically and accumulates gradients into leaves.

Operations broadcast like numpy; gradients are summed back to the input
shapes.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericDomainError

_CANONICAL = False
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextlib.contextmanager
def canonical_reduction():
    """Make matmul and softmax sums independent of the order of their terms.

    Inside this context each reduction sorts its terms before summing, so a
    permutation of the reduced axis yields bit-identical results. Slow and
    memory-hungry (materialises every product); meant for verification.
    """
    global _CANONICAL
    prev = _CANONICAL
    _CANONICAL = True
    try:
        yield
    finally:
        _CANONICAL = prev


@dataclass
class TapeNode:
    op: str
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Dense float64 array participating in the differentiation graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _node=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: TapeNode | None = _node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, inputs, vjp):
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._node = TapeNode(op, tuple(inputs), vjp)
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` over the axes that broadcasting expanded to reach it."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for inp in t._node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t._node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for inp, gi in zip(t._node.inputs, t._node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = gi if prev is None else prev + gi


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data, "add", (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data, "sub", (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data, "mul", (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def gelu(x):
    """x * Phi(x) with the exact erf form of the normal CDF."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(x.data * cdf, "gelu", (x,), vjp)


def dropout(x, rate, rng):
    """Inverted dropout; identity when ``rate`` is 0."""
    x = as_tensor(x)
    if rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {rate}")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * mask, "dropout", (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, "sum", (x,), vjp)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- shape ops


def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a1=-1, a2=-2):
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, a1, a2), "swapaxes", (x,), lambda g: (np.swapaxes(g, a1, a2),))


def getitem(x, idx):
    x = as_tensor(x)
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (int, slice, np.integer)) for p in parts)

    def vjp(g):
        out = np.zeros_like(x.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], "getitem", (x,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def pick(x, index):
    """Select ``x[i, index[i]]`` for each row of a 2-D tensor."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(x.shape[0])

    def vjp(g):
        out = np.zeros_like(x.data)
        out[rows, index] = g
        return (out,)

    return _make(x.data[rows, index], "pick", (x,), vjp)


# ---------------------------------------------------------------- linear algebra


def _sorted_matmul(a, b):
    prod = a[..., :, :, None] * b[..., None, :, :]
    prod = np.sort(np.moveaxis(prod, -2, -1), axis=-1)
    return prod.sum(axis=-1)


def matmul(a, b):
    """Batched matrix product over the last two axes.

    Gradients: dA = dC @ B^T, dB = A^T @ dC, reduced over broadcast batch axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = _sorted_matmul(a.data, b.data) if _CANONICAL else a.data @ b.data

    def vjp(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, "matmul", (a, b), vjp)


def _check_finite(x, op):
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"{op}: input contains NaN or Inf")


def softmax_rows(x):
    """Softmax along the last axis with max subtraction."""
    x = as_tensor(x)
    _check_finite(x.data, "softmax_rows")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    denom = np.sort(e, axis=-1).sum(axis=-1, keepdims=True) if _CANONICAL else e.sum(axis=-1, keepdims=True)
    p = e / denom

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, "softmax", (x,), vjp)


def log_softmax(x):
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log_softmax", (x,), vjp)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise each trailing-axis slice to zero mean, unit (biased) variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs at least 2 features, got {d}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match ({d},)")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, "layer_norm", (x, gamma, beta), vjp)


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)
