"""Reverse-mode automatic differentiation over numpy float64 arrays.

The graph is define-by-run: every op returns a new :class:`Tensor` holding a
reference to its inputs and a closure mapping the output gradient to the
input gradients. :func:`backward` linearises the graph reachable from a scalar
loss into a :class:`Tape` and walks it in reverse.

A graph must stay on one thread. Independent graphs may run concurrently.
"""
from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BatchSizeError, ContractError, DimensionError, DomainError, NumericError

_node_ids = itertools.count()
_DEBUG = os.environ.get("TRIPLETSV_DEBUG", "") not in ("", "0")

STDDEV_EPS = 1e-10
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def set_debug(enabled: bool) -> None:
    """Toggle the finite-value check run after every op and gradient."""
    global _DEBUG
    _DEBUG = bool(enabled)


def debug_enabled() -> bool:
    return _DEBUG


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {what}")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.node_id = next(_node_ids)
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    if _DEBUG:
        _check_finite(out.data, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_pair(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(t.data * c, (t,), lambda g: (g * c,), "scale")


def relu(t: Tensor) -> Tensor:
    # gradient at exactly 0 is 0
    out = np.maximum(t.data, 0.0)
    return _make(out, (t,), lambda g: (np.where(out > 0, g, 0.0),), "relu")


def sigmoid(t: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * t.data))
    return _make(s, (t,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(t: Tensor) -> Tensor:
    y = np.tanh(t.data)
    return _make(y, (t,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(t: Tensor) -> Tensor:
    y = np.exp(t.data)
    return _make(y, (t,), lambda g: (g * y,), "exp")


def log(t: Tensor) -> Tensor:
    if np.any(t.data <= 0):
        raise DomainError("log: input must be strictly positive")
    x = t.data
    return _make(np.log(x), (t,), lambda g: (g / x,), "log")


def sqrt(t: Tensor) -> Tensor:
    if np.any(t.data < 0):
        raise DomainError("sqrt: input must be non-negative")
    y = np.sqrt(t.data)
    return _make(y, (t,), lambda g: (g / (2.0 * y),), "sqrt")


def square(t: Tensor) -> Tensor:
    x = t.data
    return _make(x * x, (t,), lambda g: (2.0 * x * g,), "square")


def softplus(t: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = t.data
    return _make(np.logaddexp(0.0, x), (t,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),), "softplus")


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(t: Tensor, axis: int) -> int:
    if not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {t.shape}")
    axis %= t.ndim
    if t.shape[axis] == 0:
        raise DimensionError(f"reduction over empty axis {axis} of shape {t.shape}")
    return axis


def _reduce_sum(x: np.ndarray, axis, keepdims: bool, order_invariant: bool) -> np.ndarray:
    if order_invariant:
        # a canonical summation order makes the result independent of element order
        x = np.sort(x, axis=axis) if axis is not None else np.sort(x, axis=None)
        if axis is None and keepdims:
            return np.sum(x).reshape((1,) * x.ndim)
    return np.sum(x, axis=axis, keepdims=keepdims)


def sum(t: Tensor, axis: int | None = None, keepdims: bool = False,  # noqa: A001
        order_invariant: bool = False) -> Tensor:
    shape = t.shape
    if axis is not None:
        axis = _norm_axis(t, axis)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(_reduce_sum(t.data, axis, keepdims, order_invariant), (t,), bw, "sum")


def mean(t: Tensor, axis: int | None = None, keepdims: bool = False,
         order_invariant: bool = False) -> Tensor:
    n = t.size if axis is None else t.shape[_norm_axis(t, axis)]
    return scale(sum(t, axis, keepdims, order_invariant), 1.0 / n)


def stddev(t: Tensor, axis: int, eps: float = STDDEV_EPS, keepdims: bool = False,
           order_invariant: bool = False) -> Tensor:
    """Population standard deviation, ``sqrt(var + eps)``."""
    axis = _norm_axis(t, axis)
    n = t.shape[axis]
    if n < 2:
        raise DimensionError(f"stddev needs at least 2 elements along axis {axis}, got {n}")
    mu = _reduce_sum(t.data, axis, True, order_invariant) / n
    d = t.data - mu
    s = np.sqrt(_reduce_sum(d * d, axis, True, order_invariant) / n + eps)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * d / (n * s),)

    out = s if keepdims else np.squeeze(s, axis=axis)
    return _make(out, (t,), bw, "stddev")


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(t, axis)
    z = t.data - t.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (t,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    orig = t.shape
    try:
        out = t.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {orig} as {tuple(shape)}") from None
    return _make(out, (t,), lambda g: (g.reshape(orig),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: empty tensor list")
    ref = tensors[0]
    axis = axis % ref.ndim if -ref.ndim <= axis < ref.ndim else None
    if axis is None:
        raise DimensionError(f"concat: axis out of range for shape {ref.shape}")
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise DimensionError(f"concat: shape {t.shape} incompatible with {ref.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def slice(t: Tensor, axis: int, start: int, end: int) -> Tensor:  # noqa: A001
    if not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"slice: axis {axis} out of range for shape {t.shape}")
    axis %= t.ndim
    n = t.shape[axis]
    if not 0 <= start < end <= n:
        raise DimensionError(f"slice [{start}:{end}) out of range for axis {axis} of size {n}")
    index = [np.s_[:]] * t.ndim
    index[axis] = np.s_[start:end]
    index = tuple(index)
    shape = t.shape

    def bw(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make(t.data[index], (t,), bw, "slice")


def take(t: Tensor, rows, axis: int = 0) -> Tensor:
    """Gather entries along ``axis``; repeated indices accumulate in the backward pass."""
    rows = np.asarray(rows, dtype=np.int64)
    axis %= t.ndim
    n = t.shape[axis]
    if rows.ndim != 1 or (rows.size and (rows.min() < -n or rows.max() >= n)):
        raise DimensionError(f"take: indices out of range for axis {axis} of size {n}")
    shape = t.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, (np.s_[:],) * axis + (rows,), g)
        return (full,)

    return _make(np.take(t.data, rows, axis=axis), (t,), bw, "take")


# ---------------------------------------------------------------------------
# batch normalisation


@dataclass
class BatchNormStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, dim: int) -> "BatchNormStats":
        return cls(np.zeros(dim), np.ones(dim))


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: BatchNormStats,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Normalise a ``[B, D]`` batch per column, then apply ``gamma * xhat + beta``.

    In train mode the batch statistics are used and ``running`` is updated in
    place (the running variance takes the unbiased batch variance). In eval
    mode ``running`` is used as-is.
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm: got x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    n = x.shape[0]
    if train:
        if n < 2:
            raise BatchSizeError(f"batchnorm in train mode needs batch size >= 2, got {n}")
        mu = x.data.mean(axis=0)
        xhat = x.data - mu
        var = np.einsum("ij,ij->j", xhat, xhat) / n
        inv = 1.0 / np.sqrt(var + eps)
        xhat *= inv
        running.mean = (1.0 - momentum) * running.mean + momentum * mu
        running.var = (1.0 - momentum) * running.var + momentum * var * (n / (n - 1))

        def bw(g):
            g_sum = g.sum(axis=0)
            g_xhat = np.einsum("ij,ij->j", g, xhat)
            dx = xhat * (-g_xhat / n)
            dx += g
            dx -= g_sum / n
            dx *= gamma.data * inv
            return dx, g_xhat, g_sum
    else:
        inv = 1.0 / np.sqrt(running.var + eps)
        xhat = (x.data - running.mean) * inv

        def bw(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(gamma.data * xhat + beta.data, (x, gamma, beta), bw, "batchnorm")


# ---------------------------------------------------------------------------
# backward


@dataclass
class Tape:
    """Topologically ordered nodes reachable from a root tensor."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in node._parents:
                if p.node_id not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Only leaves keep gradients, so repeated calls accumulate exactly.
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.record(loss)
    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            if node.requires_grad:
                if _DEBUG:
                    _check_finite(g, "backward")
                if node.grad is None:
                    node.grad = np.array(g, dtype=np.float64)
                else:
                    node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = pending.get(parent.node_id)
            pending[parent.node_id] = pg if prev is None else prev + pg
