"""Extreme-value components: parametric DoG, truncated ReLU, the EVPConv block
and the projected normalization layer.

A parametric DoG applies one shared depthwise kernel ``w`` repeatedly::

    f1 = DW(f0; w),  f2 = DW(f1; w),  d0 = f1 - f0,  d1 = f2 - f1

and EVPConv keeps the strongest responses of ``d0``/``d1``::

    z_k = tReLU(d_k)                  (or maxout: z0 = max(d0, d1), z1 = max(-d0, -d1))
    (s0, s1) = SE(concat(z0, z1))
    o = max(s0, s1)
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import ops
from .nn import Conv2d, Module, SqueezeExcite, TReLU
from .tensor import Parameter, Tensor, default_dtype


def gaussian_kernel(k: int, sigma: float = 1.0) -> np.ndarray:
    """Discretized, sum-normalized isotropic Gaussian on a k x k grid."""
    r = np.arange(k) - (k - 1) / 2.0
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


def pdog_forward(f0: Tensor, weight: Tensor, levels: int = 2) -> list[Tensor]:
    """Differences of ``levels`` successive shared-weight depthwise convolutions.

    Returns ``[d0, d1, ...]`` with ``d_i = f_{i+1} - f_i``; spatial size is kept
    with zero padding, so constant inputs give nonzero responses at borders.
    """
    if levels < 2:
        raise ValueError("pDoG needs at least two successive convolutions")
    if weight.shape[0] != f0.shape[1]:
        raise ValueError(f"pDoG kernel has {weight.shape[0]} channels, input has {f0.shape[1]}")
    pad = weight.shape[-1] // 2
    diffs = []
    prev = f0
    for _ in range(levels):
        nxt = ops.depthwise_conv2d(prev, weight, 1, pad)
        diffs.append(ops.sub(nxt, prev))
        prev = nxt
    return diffs


def maxout_extrema(d0: Tensor, d1: Tensor) -> tuple[Tensor, Tensor]:
    """Scale-space maxima and (negated) minima of two DoG responses."""
    return ops.maximum(d0, d1), ops.maximum(ops.neg(d0), ops.neg(d1))


def se_calibrate(zcat: Tensor, se: SqueezeExcite) -> Tensor:
    if zcat.shape[1] % 2:
        raise ValueError(f"SE calibration expects an even channel count, got {zcat.shape[1]}")
    return se(zcat)


def pnl_forward(x: Tensor, weight: Tensor, p_norm: float = 2.0, eps: float = 1e-8) -> Tensor:
    """Project every pixel, take per-channel spatial l2 norms, l_p-normalize.

    ``weight`` is c x p.  Each output entry equals ``sqrt(w_j^T A w_j)`` (before
    normalization) with ``A`` the pixel auto-correlation matrix of ``x``.
    """
    u = ops.pointwise_project(x, weight)
    return ops.lp_normalize(ops.spatial_l2_norm(u), p_norm, eps)


class PDoG(Module):
    """Learnable DoG with a single C x 1 x k x k kernel shared by every level."""

    kind = "pdog"

    def __init__(self, channels: int, rng: np.random.Generator, k: int = 3, levels: int = 2,
                 init: str = "gaussian", sigma: float = 1.0, noise: float = 0.01):
        if levels < 2:
            raise ValueError("pDoG needs at least two successive convolutions")
        self.levels = levels
        if init == "gaussian":
            w = np.broadcast_to(gaussian_kernel(k, sigma), (channels, 1, k, k))
            w = w + rng.uniform(-noise, noise, (channels, 1, k, k))
        elif init == "random":
            w = rng.standard_normal((channels, 1, k, k)) * np.sqrt(1.0 / (k * k))
        else:
            raise ValueError(f"unknown pDoG init {init!r}")
        self.weight = Parameter(w.astype(default_dtype()))

    def __call__(self, x: Tensor, train: bool = False) -> list[Tensor]:
        return pdog_forward(x, self.weight, self.levels)


class EVPConv(Module):
    """Drop-in replacement for a k x k convolution (Cin -> Cout, stride 1 or 2).

    A 1x1 adapter handles Cin != Cout (depthwise DoG cannot change width);
    stride 2 is realised by 2x2 average pooling after the block.  With
    ``use_trelu=False`` the extrema come from the maxout pair instead.
    """

    kind = "evpconv"

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, stride: int = 1, k: int = 3,
                 use_trelu: bool = True, theta_granularity: str = "channel",
                 se_reduction: int = 16, kernel_init: str = "gaussian"):
        if stride not in (1, 2):
            raise ValueError(f"EVPConv supports stride 1 or 2, got {stride}")
        if cin < 1 or cout < 1:
            raise ValueError("EVPConv channel counts must be positive")
        self.stride = stride
        self.adapter: Optional[Conv2d] = Conv2d(cin, cout, 1, rng) if cin != cout else None
        self.pdog = PDoG(cout, rng, k=k, init=kernel_init)
        self.trelu: Optional[TReLU] = TReLU(cout, rng, theta_granularity) if use_trelu else None
        self.se = SqueezeExcite(2 * cout, rng, reduction=se_reduction)
        self.cout = cout

    def leaf_kinds(self):
        return [self.kind]

    def stages(self, x: Tensor) -> dict[str, Tensor]:
        """Run the block and return every intermediate, keyed by stage name."""
        out: dict[str, Tensor] = {}
        f0 = self.adapter(x) if self.adapter is not None else x
        out["f0"] = f0
        d0, d1 = self.pdog(f0)[:2]
        out["d0"], out["d1"] = d0, d1
        if self.trelu is not None:
            z0, z1 = self.trelu(d0), self.trelu(d1)
        else:
            z0, z1 = maxout_extrema(d0, d1)
        out["z0"], out["z1"] = z0, z1
        s = se_calibrate(ops.concat([z0, z1], axis=1), self.se)
        out["s"] = s
        s0 = ops.channel_slice(s, 0, self.cout)
        s1 = ops.channel_slice(s, self.cout, 2 * self.cout)
        o = ops.maximum(s0, s1)
        if self.stride == 2:
            o = ops.avg_pool2d(o, 2)
        out["o"] = o
        return out

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return self.stages(x)["o"]


class PNL(Module):
    """Projected normalization layer replacing global average pooling."""

    kind = "pnl"

    def __init__(self, channels: int, rng: np.random.Generator, out_dim: Optional[int] = None,
                 p_norm: float = 2.0, eps: float = 1e-8, noise: float = 0.01):
        p = channels if out_dim is None else out_dim
        if p < 1:
            raise ValueError("PNL output dimension must be >= 1")
        w = np.eye(channels, p) + rng.uniform(-noise, noise, (channels, p))
        self.weight = Parameter(w.astype(default_dtype()))
        self.p_norm = p_norm
        self.eps = eps

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return pnl_forward(x, self.weight, self.p_norm, self.eps)
