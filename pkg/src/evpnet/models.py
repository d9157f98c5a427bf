"""SE-ResNet baselines and EVPNets for CIFAR-sized inputs.

Layout (depth = 2 + 3 * stages * blocks_per_stage)::

    input-norm -> stem 3x3 conv -> BN -> ReLU
               -> stages of bottleneck blocks (1x1 -> 3x3 -> SE -> 1x1, residual)
               -> GAP -> linear

The EVPNet toggles change that skeleton as follows:

* ``pdog``: the stem conv and each block's 3x3 conv become EVPConv; the
  block's own SE is dropped because EVPConv carries one.
* ``trelu``: inside EVPConv the extrema use tReLU instead of maxout.  Without
  ``pdog`` it instead swaps every ReLU inside the residual blocks for tReLU.
* ``pnl``: GAP becomes the projected normalization layer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .evp import PNL, EVPConv
from .nn import (BatchNorm2d, Conv2d, GlobalAvgPool, InputNorm, Linear, Module, ReLU,
                 SqueezeExcite, TReLU)
from .tensor import Tensor, precision

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
FAMILIES = ("se-resnet", "evpnet")


@dataclass
class ModelConfig:
    family: str = "evpnet"
    depth: int = 20
    widths: tuple = (16, 32, 64)
    pdog: Optional[bool] = None
    trelu: Optional[bool] = None
    pnl: Optional[bool] = None
    num_classes: int = 10
    in_channels: int = 3
    input_size: int = 32
    mid_divisor: int = 4
    mid_min: int = 8
    se_reduction: int = 16
    theta_granularity: str = "channel"
    pdog_init: str = "gaussian"
    pnl_norm: float = 2.0
    input_mean: tuple = CIFAR_MEAN
    input_std: tuple = CIFAR_STD

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.input_mean = tuple(float(v) for v in self.input_mean)
        self.input_std = tuple(float(v) for v in self.input_std)

    def toggles(self) -> dict[str, bool]:
        """Resolved component switches; unset switches follow the family."""
        on = self.family == "evpnet"
        if self.family == "se-resnet" and any((self.pdog, self.trelu, self.pnl)):
            raise ValueError("se-resnet family takes no EVP components; use family=evpnet")
        return {name: (on if getattr(self, name) is None else bool(getattr(self, name)))
                for name in ("pdog", "trelu", "pnl")}

    @property
    def blocks_per_stage(self) -> int:
        return (self.depth - 2) // (3 * len(self.widths))

    def mid_width(self, width: int) -> int:
        return max(width // self.mid_divisor, self.mid_min)

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if not self.widths or min(self.widths) < 1:
            raise ValueError(f"invalid stage widths {self.widths}")
        per = 3 * len(self.widths)
        if self.depth < 2 + per or (self.depth - 2) % per:
            raise ValueError(
                f"depth {self.depth} is not 2 + {per} * blocks for {len(self.widths)} stages")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.input_mean) != self.in_channels or len(self.input_std) != self.in_channels:
            raise ValueError("input_mean/input_std must have one entry per input channel")
        if self.input_size < 2 ** (len(self.widths) - 1):
            raise ValueError("input too small for the number of stride-2 stages")
        self.toggles()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        d["input_mean"] = list(self.input_mean)
        d["input_std"] = list(self.input_std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _activation(cfg: ModelConfig, channels: int, rng, in_block: bool) -> Module:
    t = cfg.toggles()
    if in_block and t["trelu"] and not t["pdog"]:
        return TReLU(channels, rng, cfg.theta_granularity)
    return ReLU()


class Stem(Module):
    def __init__(self, cfg: ModelConfig, rng):
        w0 = cfg.widths[0]
        if cfg.toggles()["pdog"]:
            self.evp = EVPConv(cfg.in_channels, w0, rng, use_trelu=cfg.toggles()["trelu"],
                               theta_granularity=cfg.theta_granularity,
                               se_reduction=cfg.se_reduction, kernel_init=cfg.pdog_init)
        else:
            self.conv = Conv2d(cfg.in_channels, w0, 3, rng)
        self.bn = BatchNorm2d(w0)
        self.act = ReLU()

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        for _, layer in self.children():
            x = layer(x, train)
        return x


class Bottleneck(Module):
    def __init__(self, cin: int, cout: int, stride: int, cfg: ModelConfig, rng):
        mid = cfg.mid_width(cout)
        use_pdog = cfg.toggles()["pdog"]
        self.conv1 = Conv2d(cin, mid, 1, rng)
        self.bn1 = BatchNorm2d(mid)
        self.act1 = _activation(cfg, mid, rng, True)
        if use_pdog:
            self.evp = EVPConv(mid, mid, rng, stride=stride, use_trelu=cfg.toggles()["trelu"],
                               theta_granularity=cfg.theta_granularity,
                               se_reduction=cfg.se_reduction, kernel_init=cfg.pdog_init)
        else:
            self.conv2 = Conv2d(mid, mid, 3, rng, stride=stride)
        self.bn2 = BatchNorm2d(mid)
        self.act2 = _activation(cfg, mid, rng, True)
        if not use_pdog:
            self.se = SqueezeExcite(mid, rng, reduction=cfg.se_reduction)
        self.conv3 = Conv2d(mid, cout, 1, rng)
        self.bn3 = BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.sc_conv = Conv2d(cin, cout, 1, rng, stride=stride)
            self.sc_bn = BatchNorm2d(cout)
        self.act_out = _activation(cfg, cout, rng, True)

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        h = self.act1(self.bn1(self.conv1(x), train))
        h = self.evp(h) if hasattr(self, "evp") else self.conv2(h)
        h = self.act2(self.bn2(h, train))
        if hasattr(self, "se"):
            h = self.se(h)
        h = self.bn3(self.conv3(h), train)
        sc = self.sc_bn(self.sc_conv(x), train) if hasattr(self, "sc_conv") else x
        return self.act_out(ops.add(h, sc))


class Head(Module):
    def __init__(self, cfg: ModelConfig, rng):
        c = cfg.widths[-1]
        if cfg.toggles()["pnl"]:
            self.pnl = PNL(c, rng, p_norm=cfg.pnl_norm)
            dim = self.pnl.out_dim
        else:
            self.gap = GlobalAvgPool()
            dim = c
        self.fc = Linear(dim, cfg.num_classes, rng)

    def features(self, x: Tensor) -> Tensor:
        return self.pnl(x) if hasattr(self, "pnl") else self.gap(x)

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        return self.fc(self.features(x))


class ModelGraph(Module):
    """An instantiated network with named parameters and tap points.

    Taps, in order: stem output, every residual block output, and the
    pre-classifier feature vector.
    """

    kind = "model"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.config = cfg
        self.norm = InputNorm(cfg.input_mean, cfg.input_std)
        self.stem = Stem(cfg, rng)
        self.blocks: list[tuple[str, Bottleneck]] = []
        cin = cfg.widths[0]
        for s, width in enumerate(cfg.widths):
            for b in range(cfg.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                self.blocks.append((f"stage{s + 1}.block{b}", Bottleneck(cin, width, stride, cfg, rng)))
                cin = width
        self.head = Head(cfg, rng)
        self.assign_names()

    def children(self):
        yield "norm", self.norm
        yield "stem", self.stem
        yield from self.blocks
        yield "head", self.head

    @property
    def tap_names(self) -> list[str]:
        return ["stem"] + [name for name, _ in self.blocks] + ["head"]

    def forward(self, x, train: bool = False, with_taps: bool = False):
        x = x if isinstance(x, Tensor) else Tensor(x)
        c, s = self.config.in_channels, self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (c, s, s):
            raise ValueError(f"model expects N x {c} x {s} x {s} input, got {x.shape}")
        taps = []
        h = self.stem(self.norm(x), train)
        taps.append(h)
        for _, block in self.blocks:
            h = block(h, train)
            taps.append(h)
        feat = self.head.features(h)
        taps.append(feat)
        logits = self.head.fc(feat)
        return (logits, taps) if with_taps else logits

    __call__ = forward

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        """Eval-mode logits as a numpy array, in batches."""
        x = x.data if isinstance(x, Tensor) else np.asarray(x)
        outs = [self.forward(Tensor(x[i : i + batch_size])).data
                for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.config.num_classes))

    def layer_types(self) -> list[str]:
        return self.leaf_kinds()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = set(targets) - set(state)
        extra = set(state) - set(targets)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in targets.items():
            if arr.shape != state[name].shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {arr.shape}")
            arr[...] = state[name]
        for _, module in self._all_modules():
            if isinstance(module, BatchNorm2d):
                module.stats.updated = True

    def _all_modules(self, prefix: str = "", module: Optional[Module] = None):
        module = self if module is None else module
        for key, child in module.children():
            yield prefix + key, child
            yield from self._all_modules(f"{prefix}{key}.", child)


def build(config: ModelConfig, seed: int = 0, dtype=None) -> ModelGraph:
    """Instantiate ``config`` with parameters drawn from ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    if dtype is None:
        return ModelGraph(config, rng)
    with precision(dtype):
        return ModelGraph(config, rng)


def save_model(model: ModelGraph, stem) -> None:
    from .serialize import save_checkpoint

    save_checkpoint(stem, model.state_dict(), {"config": model.config.to_dict()})


def load_model(stem) -> ModelGraph:
    from .serialize import load_checkpoint

    state, meta = load_checkpoint(stem)
    cfg = ModelConfig.from_dict(meta["config"])
    dtype = next(iter(state.values())).dtype
    model = build(cfg, seed=0, dtype=dtype.type)
    model.load_state_dict(state)
    return model
