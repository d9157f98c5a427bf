"""Differentiable operations on :class:`~evpnet.tensor.Tensor`.

Every op computes its forward value with numpy and hands a backward closure
to :func:`~evpnet.tensor.emit`.  Backward closures return one gradient (or
``None``) per input, in input order.

Conventions:

* convolutions are cross-correlations (no kernel flip) with zero padding;
* ``maximum``/``minimum`` route the gradient of a tie to the first argument;
* the subgradient of ``abs`` (and ``sign``) at zero is zero.
"""

from __future__ import annotations

import warnings
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, emit


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _same_shape(opname: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return emit(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return emit(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return emit(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)

    def backward(g):
        return (g * s,)

    return emit(a.data * s, (a,), backward)


def neg(a: Tensor) -> Tensor:
    return emit(-a.data, (a,), lambda g: (-g,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward(g):
        return (g * np.sign(a.data),)

    return emit(np.abs(a.data), (a,), backward)


def sign(a: Tensor) -> Tensor:
    """Elementwise sign; piecewise constant, so its gradient is zero."""
    return emit(np.sign(a.data), (a,), lambda g: (None,))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("maximum", a, b)
    pick_a = a.data >= b.data

    def backward(g):
        zero = np.zeros_like(g)
        return np.where(pick_a, g, zero), np.where(pick_a, zero, g)

    return emit(np.where(pick_a, a.data, b.data), (a, b), backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("minimum", a, b)
    pick_a = a.data <= b.data

    def backward(g):
        zero = np.zeros_like(g)
        return np.where(pick_a, g, zero), np.where(pick_a, zero, g)

    return emit(np.where(pick_a, a.data, b.data), (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return emit(np.where(mask, a.data, a.dtype.type(0)), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)

    def backward(g):
        return (g * y * (1 - y),)

    return emit(y, (a,), backward)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return emit(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return emit(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def channel_slice(a: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of an N x C x ... tensor."""

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return emit(a.data[:, start:stop], (a,), backward)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each (n, c) plane of an N x C x H x W map by ``s[n, c]``."""
    if s.shape != x.shape[:2]:
        raise ValueError(f"scale_channels: scales {s.shape} do not match map {x.shape}")
    return mul(x, reshape(s, s.shape + (1,) * (x.ndim - 2)))


# ---------------------------------------------------------------------------
# convolution and pooling


def _out_size(h: int, k: int, stride: int, padding: int) -> int:
    return (h + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation of N x Cin x H x W with Cout x Cin x k x k."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels but weight expects {wcin}")
    if kh != kw or kh < 1:
        raise ValueError(f"conv2d: kernel must be square and >= 1, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be positive and padding non-negative")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {kh} larger than padded input {h}x{w} (pad {padding})")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    k, s = kh, stride
    ho, wo = _out_size(h, k, s, padding), _out_size(w, k, s, padding)
    xp = _pad(x.data, padding)
    if k == 1:
        cols = xp[:, :, ::s, ::s][:, :, :ho, :wo]
        out = np.einsum("nchw,oc->nohw", cols, weight.data[:, :, 0, 0], optimize=True)
    else:
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            if k == 1:
                gw = np.einsum("nohw,nchw->oc", g, cols, optimize=True)[:, :, None, None]
            else:
                gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            if k == 1:
                gxp[:, :, : s * ho : s, : s * wo : s] = np.einsum(
                    "nohw,oc->nchw", g, weight.data[:, :, 0, 0], optimize=True)
            else:
                # C x k x k x N x Ho x Wo
                gcols = np.tensordot(weight.data, g, axes=([0], [1]))
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return emit(out, inputs, backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel cross-correlation: channel c of the output sees only channel c."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"depthwise_conv2d: expected 4-D tensors, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    wc, one, k, k2 = weight.shape
    if wc != c or one != 1:
        raise ValueError(f"depthwise_conv2d: weight {weight.shape} does not match {c} input channels")
    if k != k2 or k < 1:
        raise ValueError(f"depthwise_conv2d: kernel must be square, got {k}x{k2}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"depthwise_conv2d: kernel {k} larger than padded input {h}x{w}")
    s = stride
    ho, wo = _out_size(h, k, s, padding), _out_size(w, k, s, padding)
    xp = _pad(x.data, padding)
    wd = weight.data
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x.dtype, weight.dtype))
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + s * ho : s, j : j + s * wo : s] * wd[:, 0, i, j].reshape(1, c, 1, 1)

    def backward(g):
        gx = gw = None
        if weight.requires_grad:
            gw = np.empty_like(wd)
            for i in range(k):
                for j in range(k):
                    gw[:, 0, i, j] = np.einsum(
                        "nchw,nchw->c", g, xp[:, :, i : i + s * ho : s, j : j + s * wo : s], optimize=True)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += g * wd[:, 0, i, j].reshape(1, c, 1, 1)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw

    return emit(out, (x, weight), backward)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling (kernel = stride = ``size``)."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ValueError(f"avg_pool2d: input {h}x{w} smaller than window {size}")
    crop = x.data[:, :, : ho * size, : wo * size]
    out = crop.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))

    def backward(g):
        gx = np.zeros_like(x.data)
        up = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
        gx[:, :, : ho * size, : wo * size] = up
        return (gx,)

    return emit(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, N x C x H x W -> N x C."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool: expected N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError("global_avg_pool: empty spatial extent")

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return emit(x.data.mean(axis=(2, 3)), (x,), backward)


# ---------------------------------------------------------------------------
# dense layers and losses


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map of N x D input with a D x K weight."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return emit(out, inputs, backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, labels]).mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1
        return (p * (g / n),)

    return emit(loss, (logits,), backward)


class RunningStats:
    """Batch-norm running mean/variance, updated in train mode."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.updated = False
        self._warned = False


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, train: bool,
               momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of N x C x H x W (or N x C).

    ``momentum`` is the weight kept by the running statistics.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    m = x.size // x.shape[1]
    if train:
        if m < 2:
            raise ValueError("batch_norm: need at least two values per channel in train mode")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.mean[...] = momentum * stats.mean + (1 - momentum) * mu
        stats.var[...] = momentum * stats.var + (1 - momentum) * var * (m / (m - 1))
        stats.updated = True
    else:
        if not stats.updated and not stats._warned:
            warnings.warn("batch_norm: eval mode before any training step; using initial stats",
                          RuntimeWarning, stacklevel=2)
            stats._warned = True
        mu, var = stats.mean, stats.var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if train:
                gx = (inv.reshape(bshape) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return emit(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# extreme-value components


def trelu(x: Tensor, theta: Tensor) -> Tensor:
    """Truncated ReLU: ``|x| - |theta|`` where ``|x| >= |theta|``, else 0.

    ``theta`` is a scalar (shape ``(1,)``) or one value per channel (axis 1).
    """
    if theta.size == 1:
        th_shape = (1,) * x.ndim
    elif x.ndim >= 2 and theta.shape == (x.shape[1],):
        th_shape = (1, -1) + (1,) * (x.ndim - 2)
    else:
        raise ValueError(f"trelu: threshold shape {theta.shape} does not fit input {x.shape}")
    th = theta.data.reshape(th_shape)
    th_eff = np.abs(th)
    ax = np.abs(x.data)
    active = ax >= th_eff
    out = np.where(active, ax - th_eff, x.dtype.type(0))
    red = tuple(i for i in range(x.ndim) if th_shape[i] == 1)

    def backward(g):
        ga = g * active
        gx = ga * np.sign(x.data) if x.requires_grad else None
        gt = None
        if theta.requires_grad:
            gt = (-(ga.sum(axis=red, keepdims=True)) * np.sign(th)).reshape(theta.shape)
        return gx, gt

    return emit(out, (x, theta), backward)


def pointwise_project(x: Tensor, weight: Tensor) -> Tensor:
    """Per-pixel projection ``u_i = W^T x_i`` with W of shape c x p."""
    if x.ndim != 4 or weight.ndim != 2 or weight.shape[0] != x.shape[1]:
        raise ValueError(f"pointwise_project: weight {weight.shape} vs input {x.shape}")
    out = np.einsum("nchw,cp->nphw", x.data, weight.data, optimize=True)

    def backward(g):
        gx = np.einsum("nphw,cp->nchw", g, weight.data, optimize=True) if x.requires_grad else None
        gw = np.einsum("nchw,nphw->cp", x.data, g, optimize=True) if weight.requires_grad else None
        return gx, gw

    return emit(out, (x, weight), backward)


def spatial_l2_norm(u: Tensor) -> Tensor:
    """l2 norm of every channel over all pixels, N x p x H x W -> N x p."""
    flat = u.data.reshape(u.shape[0], u.shape[1], -1)
    v = np.sqrt((flat * flat).sum(axis=2))

    def backward(g):
        safe = np.where(v > 0, v, 1)
        coef = np.where(v > 0, g / safe, 0)
        return ((flat * coef[:, :, None]).reshape(u.shape),)

    return emit(v, (u,), backward)


def lp_normalize(v: Tensor, p: float = 2.0, eps: float = 1e-8) -> Tensor:
    """Rows of N x D divided by their l_p norm plus ``eps``."""
    a = np.abs(v.data)
    norm = (a ** p).sum(axis=1) ** (1.0 / p)
    denom = norm + eps
    out = v.data / denom[:, None]

    def backward(g):
        # d norm / d v = sign(v) |v|^(p-1) / norm^(p-1)
        safe = np.where(norm > 0, norm, 1)
        dn = np.where(norm[:, None] > 0, np.sign(v.data) * a ** (p - 1) / safe[:, None] ** (p - 1), 0)
        gv = g / denom[:, None] - dn * ((g * v.data).sum(axis=1) / denom ** 2)[:, None]
        return (gv,)

    return emit(out.astype(v.dtype, copy=False), (v,), backward)
