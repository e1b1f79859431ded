"""Differentiable operators.

Every function takes ``Tensor`` (or array-like) inputs and returns a new
``Tensor``. Backward closures return one gradient per parent, or ``None``
for parents that need none.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from .core import Tensor, as_tensor


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise IndexError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a, _dtype_of(b)), as_tensor(b, _dtype_of(a))
    out = a.data + b.data
    return Tensor.from_op(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a, _dtype_of(b)), as_tensor(b, _dtype_of(a))
    out = a.data - b.data
    return Tensor.from_op(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a, _dtype_of(b)), as_tensor(b, _dtype_of(a))
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a, _dtype_of(b)), as_tensor(b, _dtype_of(a))
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by zero in tensor div")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), backward)


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    f = a.dtype.type(factor)
    return Tensor.from_op(a.data * f, (a,), lambda g: (g * f,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent
    return Tensor.from_op(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    out = np.log(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g / a.data,))


def absolute(a) -> Tensor:
    """|a| with subgradient sign(a) (zero at zero)."""
    a = as_tensor(a)
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor.from_op(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient passes only where the input is inside."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor.from_op(out, (a,), lambda g: (g * inside,))


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def backward(g):
        return (_unbroadcast(np.where(mask, g, 0), a.shape), _unbroadcast(np.where(mask, 0, g), b.shape))

    return Tensor.from_op(out, (a, b), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    inv = None if axes is None else np.argsort(axes)
    return Tensor.from_op(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = np.array(a.data[index], copy=True)
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor.from_op(out, (a,), backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    axis = _check_axis(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ValueError(f"concat shape mismatch: {[t.shape for t in tensors]} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return Tensor.from_op(out, tensors, backward)


def split(a, sizes: Sequence[int], axis: int = 0) -> list:
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    if int(np.sum(sizes)) != a.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    parts, start = [], 0
    for n in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + n)
        parts.append(getitem(a, tuple(index)))
        start += n
    return parts


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul needs (m,k)@(k,n), got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor.from_op(out, (a,), backward)


def max_over_axis(a, axis: int) -> Tuple[Tensor, np.ndarray]:
    """Maximum along ``axis``; also returns the argmax used to route gradients.

    Ties resolve to the first index, so the result is order-stable.
    """
    a = as_tensor(a)
    axis = _check_axis(axis, a.ndim)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return Tensor.from_op(out, (a,), backward), idx


def segment_sum(a, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``a`` (first axis) into ``num_segments`` buckets.

    Rows whose id is negative are dropped. Accumulation runs in a fixed
    order (stable sort by id, then left to right), so results are
    reproducible bit for bit.
    """
    a = as_tensor(a)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if ids.shape != (a.shape[0],):
        raise ValueError(f"segment ids shape {ids.shape} does not match rows {a.shape[0]}")
    keep = np.nonzero(ids >= 0)[0]
    if keep.size and ids[keep].max() >= num_segments:
        raise IndexError("segment id out of range")
    order = keep[np.argsort(ids[keep], kind="stable")]
    sorted_ids = ids[order]
    out = np.zeros((num_segments,) + a.shape[1:], dtype=a.dtype)
    if order.size:
        starts = np.concatenate(([0], np.nonzero(np.diff(sorted_ids))[0] + 1))
        out[sorted_ids[starts]] = np.add.reduceat(a.data[order], starts, axis=0)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[keep] = g[ids[keep]]
        return (ga,)

    return Tensor.from_op(out, (a,), backward)


def scatter_rows(a, rows: np.ndarray, num_rows: int) -> Tensor:
    """Place row ``i`` of ``a`` at ``rows[i]`` of a zero tensor; rows must be unique."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    if np.unique(rows).size != rows.size:
        raise ValueError("scatter_rows needs unique target rows")
    out = np.zeros((num_rows,) + a.shape[1:], dtype=a.dtype)
    out[rows] = a.data
    return Tensor.from_op(out, (a,), lambda g: (g[rows],))


# ---------------------------------------------------------------------------
# convolution and normalization
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input with OIkk weights."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {ci}")
    if kh != kw:
        raise ValueError("conv2d supports square kernels only")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {o} output channels")
    k = kh
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ValueError(f"conv2d kernel {k} larger than padded input {hp}x{wp}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1

    if k == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride]
        cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(-1, c)
        w2 = weight.data.reshape(o, c)
        out = (cols @ w2.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias.data[None, :, None, None]
        out = np.ascontiguousarray(out)

        def backward(g):
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
            gx = gw = gb = None
            if x.requires_grad:
                gsub = (g2 @ w2).reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
                if stride == 1:
                    gx = np.ascontiguousarray(gsub)
                else:
                    gx = np.zeros_like(x.data)
                    gx[:, :, ::stride, ::stride] = gsub
            if weight.requires_grad:
                gw = (g2.T @ cols).reshape(weight.shape)
            if bias is not None and bias.requires_grad:
                gb = g2.sum(axis=0)
            return gx, gw, gb

        parents = (x, weight) + ((bias,) if bias is not None else ())
        return Tensor.from_op(out, parents, backward)

    # channel-major im2col: rows (c, i, j), columns (n, ho, wo); each tap is one slice copy
    xt = x.data.transpose(1, 0, 2, 3)
    xp = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xt
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(c * k * k, n * ho * wo)
    w2 = weight.data.reshape(o, c * k * k)
    out = (w2 @ cols).reshape(o, n, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (w2.T @ gt).reshape(c, k, k, n, ho, wo)
            gxp = np.zeros((c, n, hp, wp), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            gx = np.ascontiguousarray(gx.transpose(1, 0, 2, 3))
        if weight.requires_grad:
            gw = (gt @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gt.sum(axis=1)
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return Tensor.from_op(out, parents, backward)


BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def batchnorm2d(
    x,
    gamma,
    beta,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    training: bool = True,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics are used and the running buffers
    (if given) are updated in place with ``momentum``; the running variance
    takes the unbiased batch variance. In eval mode the running buffers are
    used and must be provided.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d expects NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d affine params must have shape ({c},)")
    if eps <= 0:
        raise ValueError("batchnorm2d eps must be positive")
    axes = (0, 2, 3)
    m = x.size // c if c else 0

    if training:
        if m == 0:
            raise ValueError("batchnorm2d in train mode needs a non-empty batch")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            unbiased = var * m / max(m - 1, 1)
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batchnorm2d eval mode needs running statistics")
        mu, var = running_mean, running_var

    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                gx = (
                    inv_std[None, :, None, None]
                    / m
                    * (
                        m * gxhat
                        - gxhat.sum(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                    )
                )
            else:
                gx = gxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return Tensor.from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def _dtype_of(x):
    return x.dtype if isinstance(x, (Tensor, np.ndarray)) else None
