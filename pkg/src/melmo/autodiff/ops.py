"""Differentiable operations over :class:`Tensor`.

Each op computes its forward value with numpy and registers a backward
closure returning one gradient per parent (``None`` for constants).

Broadcasting is deliberately narrow: two operands must have equal shapes,
or one of them must be a one-element tensor, or the smaller shape must equal
the trailing dimensions of the larger (the bias-add pattern).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import ContractError, DimensionError
from .tensor import Tensor

ELEMENTWISE_KINDS = ("add", "mul", "sigmoid", "tanh", "relu", "max-pool-1d")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _broadcast_kind(a_shape, b_shape) -> str:
    if a_shape == b_shape:
        return "same"
    if int(np.prod(b_shape)) == 1 and len(b_shape) <= len(a_shape):
        return "b_scalar"
    if int(np.prod(a_shape)) == 1 and len(a_shape) <= len(b_shape):
        return "a_scalar"
    if len(b_shape) < len(a_shape) and a_shape[len(a_shape) - len(b_shape):] == b_shape:
        return "b_trailing"
    if len(a_shape) < len(b_shape) and b_shape[len(b_shape) - len(a_shape):] == a_shape:
        return "a_trailing"
    raise DimensionError(f"cannot broadcast shapes {a_shape} and {b_shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind(a.shape, b.shape)
    out = a.data + b.data

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind(a.shape, b.shape)
    out = a.data - b.data

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad * bd

    def backward(g):
        ga = _reduce_to(g * bd, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (x,), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return Tensor._from_op(out, (x,), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    out = np.where(active, x.data, 0.0)

    def backward(g):
        return (g * active,)

    return Tensor._from_op(out, (x,), backward)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return Tensor._from_op(out, (x,), backward)


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data

    def backward(g):
        return (g / xd,)

    return Tensor._from_op(np.log(xd), (x,), backward)


def sum(x, axis=None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis)
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._from_op(out, (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    original = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(original),)

    return Tensor._from_op(out, (x,), backward)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")

    def backward(g):
        return (g.T,)

    return Tensor._from_op(x.data.T.copy(), (x,), backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in items)


def getitem(x, index) -> Tensor:
    """Basic (slice/int) indexing; use :func:`take` for integer gathers."""
    x = as_tensor(x)
    if not _is_basic_index(index):
        raise ContractError("getitem supports slices and integers only; use take() for gathers")
    out = x.data[index].copy()
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return Tensor._from_op(out, (x,), backward)


def take(x, indices) -> Tensor:
    """Gather rows of ``x`` along axis 0; gradients scatter-add back."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"take index out of range for axis of length {x.shape[0]}")
    out = x.data[idx]
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(out, (x,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {[t.shape for t in tensors]}") from exc

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._from_op(out, tensors, backward)


def unfold1d(x, width: int) -> Tensor:
    """Sliding windows along axis 1: [N, T, C] -> [N, T - width + 1, width * C]."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"unfold1d expects [N, T, C], got {x.shape}")
    n, t, c = x.shape
    steps = t - width + 1
    if width < 1 or steps < 1:
        raise DimensionError(f"window width {width} does not fit length {t}")
    out = np.concatenate([x.data[:, i:i + steps, :] for i in range(width)], axis=2)

    def backward(g):
        full = np.zeros((n, t, c))
        for i in range(width):
            full[:, i:i + steps, :] += g[:, :, i * c:(i + 1) * c]
        return (full,)

    return Tensor._from_op(out, (x,), backward)


def conv1d(x, weight, bias) -> Tensor:
    """Valid 1-D convolution over axis 1 of [N, T, C_in] with weight [width, C_in, C_out]."""
    x, weight = as_tensor(x), as_tensor(weight)
    width, c_in, c_out = weight.shape
    if x.ndim != 3 or x.shape[2] != c_in:
        raise DimensionError(f"conv1d input {x.shape} vs weight {weight.shape}")
    n = x.shape[0]
    cols = unfold1d(x, width)
    steps = cols.shape[1]
    y = matmul(reshape(cols, (n * steps, width * c_in)), reshape(weight, (width * c_in, c_out)))
    return reshape(add(y, bias), (n, steps, c_out))


def max_pool1d(x, window: int) -> Tensor:
    """Non-overlapping max-pooling along the time axis.

    Accepts [T], [N, T] or [N, T, C]; time is axis 0 for 1-D input and axis 1
    otherwise. A trailing remainder shorter than ``window`` is dropped.
    Ties route the gradient to the first maximal position.
    """
    x = as_tensor(x)
    original = x.shape
    if x.ndim == 1:
        data = x.data.reshape(1, -1, 1)
    elif x.ndim == 2:
        data = x.data[:, :, None]
    elif x.ndim == 3:
        data = x.data
    else:
        raise DimensionError(f"max_pool1d expects 1-3 dims, got {original}")
    n, t, c = data.shape
    if window < 1 or window > t:
        raise DimensionError(f"pool window {window} does not fit length {t}")
    steps = t // window
    blocks = data[:, :steps * window, :].reshape(n, steps, window, c)
    arg = blocks.argmax(axis=2)
    pooled = np.take_along_axis(blocks, arg[:, :, None, :], axis=2)[:, :, 0, :]
    if x.ndim == 1:
        out = pooled.reshape(steps)
    elif x.ndim == 2:
        out = pooled[:, :, 0]
    else:
        out = pooled

    def backward(g):
        g3 = g.reshape(n, steps, c)
        gb = np.zeros((n, steps, window, c))
        np.put_along_axis(gb, arg[:, :, None, :], g3[:, :, None, :], axis=2)
        full = np.zeros((n, t, c))
        full[:, :steps * window, :] = gb.reshape(n, steps * window, c)
        return (full.reshape(original),)

    return Tensor._from_op(out, (x,), backward)


def max_over_time(x) -> Tensor:
    """Global max over axis 1 of [N, T, C] -> [N, C]."""
    x = as_tensor(x)
    pooled = max_pool1d(x, x.shape[1])
    return reshape(pooled, (x.shape[0], x.shape[2]))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward)


def softmax_cross_entropy(logits, targets, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax.

    With ``weights`` the mean is ``sum(w * nll) / sum(w)``; rows with zero
    weight may carry any target value and contribute exactly nothing.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [batch, V], got {logits.shape}")
    n, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"{targets.shape[0]} targets for {n} logit rows")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise DimensionError(f"{w.shape[0]} weights for {n} logit rows")
    live = w != 0
    if np.any((targets[live] < 0) | (targets[live] >= vocab)):
        raise IndexError(f"target id outside [0, {vocab})")
    total = w.sum()
    if total <= 0:
        raise ContractError("softmax_cross_entropy needs positive total weight")
    safe = np.where(live, targets, 0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), safe]
    out = np.asarray((w * nll).sum() / total)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), safe] -= 1.0
        return (p * (w / total)[:, None] * g,)

    return Tensor._from_op(out, (logits,), backward)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy between sigmoid(logits) and 0/1 targets."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise DimensionError(f"targets {y.shape} vs logits {logits.shape}")
    x = logits.data
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(per.mean())
    count = x.size

    def backward(g):
        return ((_sigmoid(x) - y) * (g / count),)

    return Tensor._from_op(out, (logits,), backward)


def elementwise(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one of :data:`ELEMENTWISE_KINDS` by name."""
    if kind == "add":
        return add(*inputs)
    if kind == "mul":
        return mul(*inputs)
    if kind == "sigmoid":
        return sigmoid(*inputs)
    if kind == "tanh":
        return tanh(*inputs)
    if kind == "relu":
        return relu(*inputs)
    if kind == "max-pool-1d":
        return max_pool1d(*inputs, **kwargs)
    raise ContractError(f"unknown elementwise kind {kind!r}")
