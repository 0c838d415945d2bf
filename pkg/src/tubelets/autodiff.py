"""Minimal reverse-mode autodiff on float64 numpy arrays.

Every forward op records its local backward rule on a tape; calling
``backward`` on a scalar node walks the tape in reverse topological order
and accumulates gradients into ``.grad`` (summed, never overwritten).
Just enough ops for a transformer plus the matched set losses.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np
from scipy.special import erf


class Tensor:
    __slots__ = ("data", "grad", "parents", "_backward", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None,
                 name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.parents = parents if self.requires_grad else ()
        self._backward: Optional[Callable[[np.ndarray], None]] = backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Reverse pass from this node.  ``seed`` defaults to ones."""
        if seed is None:
            seed = np.ones_like(self.data)
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, local in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    pid = id(parent)
                    if pid in grads:
                        grads[pid] += local
                    else:
                        grads[pid] = np.array(local, dtype=np.float64)
            else:
                node.accumulate(g)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return ((a, _unbroadcast(g, a.data.shape)),
                (b, _unbroadcast(g, b.data.shape)))

    return Tensor(out, parents=(a, b), backward=bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return ((a, _unbroadcast(g, a.data.shape)),
                (b, _unbroadcast(-g, b.data.shape)))

    return Tensor(out, parents=(a, b), backward=bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return ((a, _unbroadcast(g * b.data, a.data.shape)),
                (b, _unbroadcast(g * a.data, b.data.shape)))

    return Tensor(out, parents=(a, b), backward=bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return ((a, _unbroadcast(g / b.data, a.data.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))

    return Tensor(out, parents=(a, b), backward=bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ((a, _unbroadcast(ga, a.data.shape)),
                (b, _unbroadcast(gb, b.data.shape)))

    return Tensor(out, parents=(a, b), backward=bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        return ((a, g.reshape(a.data.shape)),)

    return Tensor(out, parents=(a,), backward=bw)


def moveaxis(a, src, dst) -> Tensor:
    a = as_tensor(a)
    out = np.moveaxis(a.data, src, dst)

    def bw(g):
        return ((a, np.moveaxis(g, dst, src)),)

    return Tensor(out, parents=(a,), backward=bw)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; backward scatter-adds into the source."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        acc = np.zeros_like(a.data)
        moved = np.moveaxis(acc, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return ((a, acc),)

    return Tensor(out, parents=(a,), backward=bw)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.data.shape).copy()),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, a.data.shape).copy()),)

    return Tensor(out, parents=(a,), backward=bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def bw(g):
        return ((a, g / a.data),)

    return Tensor(out, parents=(a,), backward=bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return ((a, g * out),)

    return Tensor(out, parents=(a,), backward=bw)


def pow_const(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p

    def bw(g):
        return ((a, g * p * a.data ** (p - 1.0)),)

    return Tensor(out, parents=(a,), backward=bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        return ((a, g * out * (1.0 - out)),)

    return Tensor(out, parents=(a,), backward=bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        return ((a, g * mask),)

    return Tensor(a.data * mask, parents=(a,), backward=bw)


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact erf-based GELU."""
    a = as_tensor(a)
    phi = 0.5 * (1.0 + erf(a.data * _SQRT1_2))
    out = a.data * phi

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return ((a, g * (phi + a.data * pdf)),)

    return Tensor(out, parents=(a,), backward=bw)


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data >= b.data
    out = np.where(mask, a.data, b.data)

    def bw(g):
        return ((a, _unbroadcast(g * mask, a.data.shape)),
                (b, _unbroadcast(g * ~mask, b.data.shape)))

    return Tensor(out, parents=(a, b), backward=bw)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = a.data <= b.data
    out = np.where(mask, a.data, b.data)

    def bw(g):
        return ((a, _unbroadcast(g * mask, a.data.shape)),
                (b, _unbroadcast(g * ~mask, b.data.shape)))

    return Tensor(out, parents=(a, b), backward=bw)


def clip(a, lo: float, hi: float) -> Tensor:
    return minimum(maximum(a, lo), hi)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)

    def bw(g):
        return ((a, g * s),)

    return Tensor(np.abs(a.data), parents=(a,), backward=bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((a, out * (g - dot)),)

    return Tensor(out, parents=(a,), backward=bw)


def layer_norm(a, gamma, beta, eps: float = 1e-12) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        n = a.data.shape[-1]
        gx = g * gamma.data
        t1 = gx.mean(axis=-1, keepdims=True)
        t2 = (gx * xhat).mean(axis=-1, keepdims=True)
        ga = inv * (gx - t1 - xhat * t2)
        ggamma = _unbroadcast(g * xhat, gamma.data.shape)
        gbeta = _unbroadcast(g, beta.data.shape)
        return ((a, ga), (gamma, ggamma), (beta, gbeta))

    return Tensor(out, parents=(a, gamma, beta), backward=bw)


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a seeded mask; identity when rate is 0."""
    a = as_tensor(a)
    if rate <= 0.0:
        return a
    keep = rng.random(a.data.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep * scale

    def bw(g):
        return ((a, g * mask),)

    return Tensor(a.data * mask, parents=(a,), backward=bw)
