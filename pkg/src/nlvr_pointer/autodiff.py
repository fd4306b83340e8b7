"""Reverse-mode automatic differentiation over numpy float64 arrays.

Every differentiable function records its parents and a closure that maps the
output gradient to parent gradients.  ``Tensor.backward`` orders the recorded
graph topologically and replays the closures once each.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


class EmptySupportError(ValueError):
    """Raised when a masked reduction has no unmasked entry."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``.grad`` on every tensor that requires it.

        The receiver must be a scalar.  Gradients accumulate into existing
        ``.grad`` arrays, so callers reset them between steps.
        """
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        owned = set()
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if isinstance(pg, _IndexedGrad):
                    if key not in grads:
                        grads[key] = np.zeros(parent.shape, dtype=DTYPE)
                        owned.add(key)
                    elif key not in owned:
                        grads[key] = grads[key].copy()
                        owned.add(key)
                    pg.scatter_into(grads[key])
                elif key in grads:
                    if key in owned:
                        grads[key] += pg
                    else:
                        grads[key] = grads[key] + pg
                        owned.add(key)
                else:
                    grads[key] = pg

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # overflow-free form of 1 / (1 + exp(-z))
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _result(np.where(keep, x.data, 0.0), (x,), lambda g: (g * keep,))


def clip(x: Tensor, low: float, high: float) -> Tensor:
    """Clamp values; gradient passes only where the input is inside the range."""
    inside = (x.data >= low) & (x.data <= high)
    return _result(np.clip(x.data, low, high), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions / shape


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    """Reverse (or permute) axes; for ndim > 2 the default swaps the last two."""
    if axes is None:
        axes = tuple(range(x.ndim))[::-1] if x.ndim <= 2 else (
            tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
        )
    inverse = np.argsort(axes)
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


class _IndexedGrad:
    """Gradient that is nonzero only at ``index``; scattered lazily into a buffer."""

    __slots__ = ("index", "value", "basic")

    def __init__(self, index, value, basic):
        self.index, self.value, self.basic = index, value, basic

    def scatter_into(self, buffer: np.ndarray) -> None:
        if self.basic:
            buffer[self.index] += self.value
        else:
            np.add.at(buffer, self.index, self.value)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)
    return _result(x.data[index], (x,), lambda g: (_IndexedGrad(index, g, basic),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(out, tensors, backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with numpy batching rules; both operands need ndim >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + b.shape[-1:])
    else:
        out = a.data @ b.data

    def backward(g):
        if b.ndim == 2:
            # fold batch dims into rows instead of materializing per-batch products
            ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return _unbroadcast(ga, a.shape), gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward)


# ---------------------------------------------------------------- masked ops


def _check_support(mask: np.ndarray, axis: int, allow_empty: bool) -> np.ndarray:
    support = mask.any(axis=axis, keepdims=True)
    if not allow_empty and not support.all():
        raise EmptySupportError("masked reduction over an empty support")
    return support


def softmax_masked(logits: Tensor, mask=None, axis: int = -1, allow_empty: bool = False) -> Tensor:
    """Softmax restricted to ``mask``; masked positions get exactly 0.

    With ``allow_empty`` a slice with no unmasked entry yields all zeros
    (used for padding rows in batched code) instead of raising.
    """
    logits = as_tensor(logits)
    x = logits.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    support = _check_support(mask, axis, allow_empty)
    shifted = np.where(mask, x, -np.inf)
    top = np.where(support, shifted.max(axis=axis, keepdims=True), 0.0)
    e = np.where(mask, np.exp(np.where(mask, x, top) - top), 0.0)
    total = e.sum(axis=axis, keepdims=True)
    out = e / np.where(total > 0, total, 1.0)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _result(out, (logits,), backward)


def masked_max(x: Tensor, mask=None, axis: int = 0, allow_empty: bool = False) -> Tensor:
    """Element-wise max over ``axis`` ignoring masked slices.

    The gradient goes to the first arg-max along ``axis``.  Empty slices give
    0 when ``allow_empty``.
    """
    x = as_tensor(x)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    support = _check_support(mask, axis, allow_empty)
    filled = np.where(mask, x.data, -np.inf)
    arg = np.expand_dims(filled.argmax(axis=axis), axis)
    picked = np.take_along_axis(x.data, arg, axis=axis)
    out = np.squeeze(np.where(support, picked, 0.0), axis=axis)
    live = np.squeeze(support, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, arg, np.expand_dims(g * live, axis), axis=axis)
        return (full,)

    return _result(out, (x,), backward)


def masked_reduce_max(vectors: Sequence[Tensor], mask: Optional[Iterable[bool]] = None) -> Tensor:
    """Component-wise max over a list of same-length vectors."""
    if mask is None:
        mask = [True] * len(vectors)
    mask = np.asarray(list(mask), dtype=bool)
    if not mask.any():
        raise EmptySupportError("masked_reduce_max over an empty support")
    return masked_max(stack(vectors, axis=0), mask[:, None], axis=0)


# ---------------------------------------------------------------- stochastic


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; the identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)
