"""Differentiable ops over :class:`Tensor`.

Every op computes its forward value with numpy and registers a closure that
maps the output gradient to one gradient per input (``None`` where no
gradient flows).  Batched layouts follow ``(batch, channels, length)``; the
unbatched ``(channels, length)`` form is accepted wherever it makes sense.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit

from .tensor import Tensor, as_tensor, make_result

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    out = a.data ** p

    def bw(g):
        if p == 0.0:
            return (np.zeros_like(a.data),)
        if p == 1.0:
            return (g,)
        return (g * p * a.data ** (p - 1.0),)

    return make_result(out, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


def clip(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp values; the gradient is zero wherever the clamp is active."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return make_result(out, (a,), lambda g: (g * inside,))


# -- activations ---------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with the Gaussian CDF written via erf."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = x * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return make_result(out.astype(x.dtype, copy=False), (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), bw)


# -- reductions ----------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return make_result(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise ValueError(f"mean over an empty axis of shape {a.shape}")
    n = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape),)

    return make_result(np.asarray(out), (a,), bw)


def max(a, axis: int = -1, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Maximum along one axis; on ties the lowest index receives the gradient."""
    a = as_tensor(a)
    if axis is None:
        flat = reshape(a, (-1,))
        return max(flat, axis=0, keepdims=False)
    ax = axis % a.ndim
    if a.shape[ax] == 0:
        raise ValueError(f"max over an empty axis of shape {a.shape}")
    idx = np.expand_dims(a.data.argmax(axis=ax), ax)
    out = np.take_along_axis(a.data, idx, axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, g, axis=ax)
        return (grad,)

    return make_result(out, (a,), bw)


# -- shape manipulation ----------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    out = a.data[index]

    def bw(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return make_result(np.array(out, copy=True), (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_result(out, tensors, bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result(out, tensors, bw)


def add_n(tensors) -> Tensor:
    """Elementwise sum of equally shaped tensors."""
    tensors = [as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"add_n shape mismatch: {shape} vs {t.shape}")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data
    return make_result(out, tensors, lambda g: tuple(g for _ in tensors))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw)


def dense(x, weight, bias=None) -> Tensor:
    """Affine map ``out_i = sum_j W_ij x_j + b_i`` over the last axis of ``x``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"dense shape mismatch: input {x.shape} vs weight {weight.shape}")
    inputs = [x, weight]
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"dense shape mismatch: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data
        inputs.append(bias)

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        res = [gx, gw]
        if bias is not None:
            res.append(g2.sum(axis=0))
        return tuple(res)

    return make_result(out, inputs, bw)


def conv1d(x, kernel, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """1D cross-correlation.

    ``x`` is ``(C_in, L)`` or ``(B, C_in, L)``; ``kernel`` is
    ``(C_out, C_in // groups, k)``.  Output length is
    ``floor((L + 2 * padding - k) / stride) + 1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3 or kernel.ndim != 3:
        raise ValueError(f"conv1d dimension error: input {x.shape}, kernel {kernel.shape}")
    B, c_in, L = xd.shape
    c_out, c_g, k = kernel.shape
    if k < 1 or stride < 1 or padding < 0:
        raise ValueError(f"conv1d needs k >= 1, stride >= 1, padding >= 0 (got {k}, {stride}, {padding})")
    if groups < 1 or c_in != c_g * groups or c_out % groups:
        raise ValueError(
            f"conv1d dimension error: input {x.shape} incompatible with kernel {kernel.shape} at groups={groups}"
        )
    Lp = L + 2 * padding
    if Lp < k:
        raise ValueError(f"conv1d dimension error: padded length {Lp} shorter than kernel {kernel.shape}")
    l_out = (Lp - k) // stride + 1
    G, o_g = groups, c_out // groups

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]  # B, C_in, L_out, k
    cols = win.reshape(B, G, c_g, l_out, k).transpose(1, 0, 3, 2, 4).reshape(G, B * l_out, c_g * k)
    wmat = kernel.data.reshape(G, o_g, c_g * k)
    out = np.matmul(cols, wmat.transpose(0, 2, 1))  # G, B*L_out, o_g
    out = out.reshape(G, B, l_out, o_g).transpose(1, 0, 3, 2).reshape(B, c_out, l_out)
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ValueError(f"conv1d dimension error: bias {bias.shape} vs kernel {kernel.shape}")
        out = out + bias.data[None, :, None]
        inputs.append(bias)
    if unbatched:
        out = out[0]

    def bw(g):
        gb = g[None] if unbatched else g
        gmat = gb.reshape(B, G, o_g, l_out).transpose(1, 0, 3, 2).reshape(G, B * l_out, o_g)
        res = [None, None]
        if kernel.requires_grad:
            res[1] = np.matmul(gmat.transpose(0, 2, 1), cols).reshape(kernel.shape)
        if x.requires_grad:
            dcols = np.matmul(gmat, wmat).reshape(G, B, l_out, c_g, k)
            dcols = dcols.transpose(1, 0, 3, 2, 4).reshape(B, c_in, l_out, k)
            dxp = np.zeros((B, c_in, Lp), dtype=xd.dtype)
            span = stride * (l_out - 1) + 1
            for j in range(k):
                dxp[:, :, j:j + span:stride] += dcols[:, :, :, j]
            dx = dxp[:, :, padding:padding + L]
            res[0] = dx[0] if unbatched else dx
        if bias is not None:
            res.append(gb.sum(axis=(0, 2)))
        return tuple(res)

    return make_result(np.ascontiguousarray(out), inputs, bw)


# -- pooling -------------------------------------------------------------

def global_avg_pool(x) -> Tensor:
    """Mean over the last (temporal) axis: ``(..., C, L) -> (..., C)``."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ValueError("global_avg_pool over an empty axis")
    return mean(x, axis=-1)


def global_max_pool(x) -> Tensor:
    return max(x, axis=-1)


def channel_avg_pool(x) -> Tensor:
    """Mean over the channel axis, kept as a singleton: ``(..., C, L) -> (..., 1, L)``."""
    return mean(x, axis=-2, keepdims=True)


def channel_max_pool(x) -> Tensor:
    return max(x, axis=-2, keepdims=True)


# -- normalisation -------------------------------------------------------

def group_norm(h, groups: int, eps: float = 1e-5) -> Tensor:
    """Standardise each channel group over (channels in group, length).

    The variance is floored at ``eps`` rather than offset by it, so an already
    standardised group passes through unchanged and a constant group maps to 0.
    """
    h = as_tensor(h)
    if eps <= 0:
        raise ValueError("group_norm eps must be positive")
    unbatched = h.ndim == 2
    hd = h.data[None] if unbatched else h.data
    B, C, L = hd.shape
    if groups < 1 or C % groups:
        raise ValueError(f"group_norm: {C} channels not divisible into {groups} groups")
    xg = hd.reshape(B, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    floored = var < eps
    std = np.sqrt(np.maximum(var, eps))
    xhat = xc / std
    out = xhat.reshape(B, C, L)
    if unbatched:
        out = out[0]

    def bw(g):
        gg = (g[None] if unbatched else g).reshape(B, groups, -1)
        gmean = gg.mean(axis=2, keepdims=True)
        proj = (gg * xhat).mean(axis=2, keepdims=True)
        proj = np.where(floored, 0.0, proj)
        dx = (gg - gmean - xhat * proj) / std
        dx = dx.reshape(B, C, L)
        return (dx[0] if unbatched else dx,)

    return make_result(out, (h,), bw)


def dropout(x, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))

