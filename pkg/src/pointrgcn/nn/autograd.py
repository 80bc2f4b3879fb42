"""A small reverse-mode autodiff engine over float64 numpy arrays.

Each op records its parents and an adjoint rule on the output tensor; the graph
of recorded ops is the tape, and :func:`backward` walks it in reverse
topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .. import kernels

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes do not compose."""


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (inference)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_adjoint", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, key: index(self, key)

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / o)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], adjoint) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._adjoint = adjoint
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot {op} shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "subtract")
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "multiply")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    y = sigmoid_np(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


# ---------------------------------------------------------------- linear algebra and shape ops

def matmul(a, b) -> Tensor:
    """``a @ b`` with ``a`` of shape ``(..., n, k)`` and ``b`` of shape ``(k, m)``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")

    def adjoint(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    # always a 2-D product, so the same rows give bit-identical results whatever the batch layout
    y = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    return _make(y, (a, b), adjoint)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(y, (x,), adjoint)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def tmax(x: Tensor, axis: int) -> Tensor:
    """Max over ``axis``; the adjoint routes to the first maximal element."""
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise DimensionError(f"max over empty axis {axis} of shape {x.shape}")
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    y = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)

    def adjoint(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(y, (x,), adjoint)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(y, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),))


def index(x: Tensor, key) -> Tensor:
    def adjoint(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(x.data[key], (x,), adjoint)


# ---------------------------------------------------------------- graph ops

def _flat_rows(idx: np.ndarray, n: int) -> np.ndarray:
    batch = np.arange(idx.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
    return (idx + batch * n).reshape(-1)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Neighbour features: ``x`` ``(B, N, C)``, ``idx`` ``(B, N, k)`` -> ``(B, N, k, C)``."""
    B, N, C = x.shape
    flat = _flat_rows(idx, N)
    y = x.data.reshape(B * N, C)[flat].reshape(idx.shape + (C,))

    def adjoint(g):
        gx = np.zeros((B * N, C))
        kernels.scatter_add_rows(gx, flat, np.ascontiguousarray(g.reshape(-1, C)))
        return (gx.reshape(B, N, C),)

    return _make(y, (x,), adjoint)


def max_relative(x: Tensor, idx: np.ndarray) -> Tensor:
    """``max_u (h_u - h_v)`` over each node's neighbours; zero for empty neighbourhoods.

    ``x`` ``(B, N, C)``, ``idx`` ``(B, N, k)``. The adjoint sends ``+g`` to the
    first maximising neighbour and ``-g`` to the node itself.
    """
    B, N, C = x.shape
    k = idx.shape[-1]
    if k == 0:
        return _make(np.zeros_like(x.data), (x,), lambda g: (np.zeros_like(x.data),))
    flat = _flat_rows(idx, N)
    rows_x = x.data.reshape(B * N, C)
    best, src = kernels.max_gather(rows_x, flat.reshape(B * N, k))
    y = (best - rows_x).reshape(B, N, C)

    def adjoint(g):
        rows = src.reshape(-1)  # winning neighbour row per channel
        cells = rows * C + np.tile(np.arange(C), B * N)
        gx = np.bincount(cells, weights=g.reshape(-1), minlength=B * N * C)
        gx = gx.reshape(B, N, C) - g
        return (gx,)

    return _make(y, (x,), adjoint)


# ---------------------------------------------------------------- losses (elementwise)

def bce_with_logits(z, t) -> Tensor:
    """Elementwise ``max(z,0) - z*t + log(1 + exp(-|z|))``."""
    z = as_tensor(z)
    t = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    y = np.maximum(z.data, 0.0) - z.data * t + np.log1p(np.exp(-np.abs(z.data)))
    return _make(y, (z,), lambda g: (g * (sigmoid_np(z.data) - t),))


def smooth_l1(d) -> Tensor:
    """Elementwise Huber loss with beta = 1 on residuals ``d``."""
    d = as_tensor(d)
    a = np.abs(d.data)
    y = np.where(a < 1.0, 0.5 * d.data**2, a - 0.5)
    return _make(y, (d,), lambda g: (g * np.where(a < 1.0, d.data, np.sign(d.data)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    y = x.data - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------- backward pass

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Fills ``.grad`` on every leaf tensor with ``requires_grad`` (accumulating
    into any existing gradient) and returns ``{leaf: grad}``.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._adjoint is None:
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._adjoint(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves
