"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A Tensor wraps an ndarray and records the op that produced it; backward()
replays the tape in reverse topological order. Only the ops the dynamics
model needs are implemented, all with smooth derivatives except `max_along`
(max-pool), whose subgradient follows the first argmax.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, parents=(), vjp=None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents: tuple[Tensor, ...] = parents
        self._vjp: Callable[[np.ndarray], None] | None = vjp

    # -- construction helpers --------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> np.ndarray:
        return self.data

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward pass -----------------------------------------------------

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(_as_array(grad))
        for node in reversed(topo):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -_as_array(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(constant(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_along(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_along(self, axis, keepdims)


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else constant(value)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data + b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(out_data, parents=(a, b), vjp=vjp)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data * b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, parents=(a, b), vjp=vjp)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data / b.data

    def vjp(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor(out_data, parents=(a, b), vjp=vjp)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data @ b.data

    def vjp(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return Tensor(out_data, parents=(a, b), vjp=vjp)


def power(a, exponent: float) -> Tensor:
    a = _coerce(a)
    out_data = a.data**exponent

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return Tensor(out_data, parents=(a,), vjp=vjp)


def exp(a) -> Tensor:
    a = _coerce(a)
    out_data = np.exp(a.data)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return Tensor(out_data, parents=(a,), vjp=vjp)


def log(a) -> Tensor:
    a = _coerce(a)
    out_data = np.log(a.data)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return Tensor(out_data, parents=(a,), vjp=vjp)


def tanh(a) -> Tensor:
    a = _coerce(a)
    out_data = np.tanh(a.data)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out_data * out_data))

    return Tensor(out_data, parents=(a,), vjp=vjp)


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return Tensor(out_data, parents=(a,), vjp=vjp)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed stably; derivative is the sigmoid."""
    a = _coerce(a)
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g / (1.0 + np.exp(-x)))

    return Tensor(out_data, parents=(a,), vjp=vjp)


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def sum_along(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return Tensor(out_data, parents=(a,), vjp=vjp)


def mean_along(a, axis=None, keepdims=False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        count = a.shape[axis]
    return mul(sum_along(a, axis, keepdims), 1.0 / count)


def max_along(a, axis: int, keepdims=False) -> Tensor:
    """Max-pool along one axis; gradient flows to the first argmax."""
    a = _coerce(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)
    idx = a.data.argmax(axis=axis)

    def vjp(g):
        if not a.requires_grad:
            return
        if not keepdims:
            g_exp = np.expand_dims(g, axis)
        else:
            g_exp = g
        mask = np.zeros(a.shape)
        np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis)
        a._accumulate(mask * np.broadcast_to(g_exp, a.shape))

    return Tensor(out_data, parents=(a,), vjp=vjp)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    out_data = a.data.reshape(shape)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return Tensor(out_data, parents=(a,), vjp=vjp)


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    out_data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def vjp(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inverse))

    return Tensor(out_data, parents=(a,), vjp=vjp)


def getitem(a, key) -> Tensor:
    a = _coerce(a)
    out_data = a.data[key]

    def vjp(g):
        if a.requires_grad:
            full = np.zeros(a.shape)
            np.add.at(full, key, g)
            a._accumulate(full)

    return Tensor(out_data, parents=(a,), vjp=vjp)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    return Tensor(out_data, parents=tuple(tensors), vjp=vjp)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shift = constant(a.data.max(axis=axis, keepdims=True))  # detached, gradient-free
    e = exp(add(a, mul(shift, -1.0)))
    return div(e, sum_along(e, axis, keepdims=True))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shift = constant(a.data.max(axis=axis, keepdims=True))
    centered = add(a, mul(shift, -1.0))
    return add(centered, mul(log(sum_along(exp(centered), axis, keepdims=True)), -1.0))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    mu = mean_along(x, axis=-1, keepdims=True)
    centered = add(x, mul(mu, -1.0))
    var = mean_along(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, eps)))
    return add(mul(normed, gain), bias)


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

class ParameterStore:
    """Named float64 parameter tensors with deterministic (insertion) order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = parameter(value)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def total_count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def gradients(self) -> dict[str, np.ndarray]:
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self._params.items()
        }

    def global_grad_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float((t.grad * t.grad).sum())
        return math.sqrt(total)

    def sgd_step(self, learning_rate: float, grad_clip: float | None = None) -> None:
        scale = 1.0
        if grad_clip is not None:
            norm = self.global_grad_norm()
            if norm > grad_clip:
                scale = grad_clip / norm
        for t in self._params.values():
            if t.grad is not None:
                t.data -= learning_rate * scale * t.grad

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_arrays(self, state: dict) -> None:
        for name, t in self._params.items():
            if name not in state:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64).reshape(t.shape)
            t.data = arr.copy()
