"""Minimal module system and the standard layers used by the model zoo."""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor, default_dtype


class Module:
    """Base class: parameters and submodules are discovered from attributes
    in assignment order, lists of modules included."""

    kind = "module"

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def leaf_kinds(self) -> list[str]:
        kids = list(self.children())
        if not kids:
            return [self.kind]
        out = []
        for _, child in kids:
            out.extend(child.leaf_kinds())
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    @contextlib.contextmanager
    def frozen(self):
        """Stop parameters from requiring gradients (used by attacks)."""
        params = self.parameters()
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(params, flags):
                p.requires_grad = f


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(default_dtype())


class Conv2d(Module):
    kind = "conv"

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 bias: bool = False):
        self.stride = stride
        self.padding = k // 2
        self.weight = Parameter(he_normal(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Parameter(np.zeros(cout, dtype=default_dtype()), decay=False) if bias else None

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    kind = "bn"

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        dt = default_dtype()
        self.gamma = Parameter(np.ones(channels, dtype=dt), decay=False)
        self.beta = Parameter(np.zeros(channels, dtype=dt), decay=False)
        self.stats = ops.RunningStats(channels, dt)
        self.momentum = momentum
        self.eps = eps

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.stats.mean
        yield prefix + "running_var", self.stats.var

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.stats, train, self.momentum, self.eps)


class Linear(Module):
    """``y = x W + b`` with W stored D x K."""

    kind = "linear"

    def __init__(self, d: int, k: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(d)
        self.weight = Parameter(rng.uniform(-bound, bound, (d, k)).astype(default_dtype()))
        self.bias = Parameter(np.zeros(k, dtype=default_dtype()), decay=False) if bias else None

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class ReLU(Module):
    kind = "relu"

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return ops.relu(x)


class TReLU(Module):
    """Truncated ReLU with a learnable threshold, per channel or per block."""

    kind = "trelu"

    def __init__(self, channels: int, rng: np.random.Generator, granularity: str = "channel"):
        if granularity not in ("channel", "block"):
            raise ValueError(f"unknown threshold granularity {granularity!r}")
        n = channels if granularity == "channel" else 1
        self.theta = Parameter(rng.uniform(0.0, 1.0, n).astype(default_dtype()), decay=False)

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return ops.trelu(x, self.theta)


class GlobalAvgPool(Module):
    kind = "gap"

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return ops.global_avg_pool(x)


class InputNorm(Module):
    """Fixed per-channel ``(x - mean) / std``; keeps attacks in raw pixel space."""

    kind = "input_norm"

    def __init__(self, mean, std):
        dt = default_dtype()
        self.mean = Tensor(np.asarray(mean, dtype=dt).reshape(1, -1, 1, 1))
        self.inv_std = Tensor((1.0 / np.asarray(std, dtype=np.float64)).astype(dt).reshape(1, -1, 1, 1))

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return ops.mul(ops.sub(x, self.mean), self.inv_std)


class SqueezeExcite(Module):
    """Channel gating: GAP -> reduce -> ReLU -> expand -> sigmoid -> scale."""

    kind = "se"

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 16,
                 min_hidden: int = 4):
        hidden = max(channels // reduction, min_hidden)
        self.hidden = hidden
        self.reduce = Linear(channels, hidden, rng)
        self.expand = Linear(hidden, channels, rng)

    def leaf_kinds(self):
        return [self.kind]

    def gates(self, x: Tensor) -> Tensor:
        s = ops.global_avg_pool(x)
        s = ops.relu(self.reduce(s))
        return ops.sigmoid(self.expand(s))

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return ops.scale_channels(x, self.gates(x))


class Sequential(Module):
    kind = "sequential"

    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        for layer in self.layers:
            x = layer(x, train)
        return x
        return x
