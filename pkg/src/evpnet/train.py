"""SGD with momentum, the step learning-rate schedule, and training loops
(normal, FGSM- and PGD-adversarial)."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .attacks import AttackSpec, accuracy, adversarial_accuracy, constraint_violations, generate
from .data import DatasetHandle, augment, batches
from .tensor import Parameter, Tape, Tensor

log = logging.getLogger(__name__)

ADV_MODES = ("none", "fgsm", "pgd")
LOG_FIELDS = ("epoch", "lr", "loss", "clean_acc", "adv_acc")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainSpec:
    """Defaults follow the CIFAR recipe: 160 epochs, lr 0.1 divided by 10 at
    epochs 80 and 120, momentum 0.9.  Batch size and weight decay are not
    given by that recipe; 128 and 5e-4 are the usual choices."""

    epochs: int = 160
    batch_size: int = 128
    lr: float = 0.1
    milestones: tuple = (80, 120)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    adv_mode: str = "none"
    adv_eps: float = 8.0
    adv_mixed: bool = False
    augment: bool = False
    seed: int = 0
    verify_constraints: bool = False
    eval_attack: Optional[AttackSpec] = None
    eval_limit: Optional[int] = None

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.adv_mode not in ADV_MODES:
            raise ValueError(f"adv_mode must be one of {ADV_MODES}, got {self.adv_mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @classmethod
    def desk(cls, **kw) -> "TrainSpec":
        """CPU-sized profile: 30 epochs with milestones at 15 and 25."""
        base = dict(epochs=30, milestones=(15, 25), augment=True)
        base.update(kw)
        return cls(**base)

    def attack_for_training(self) -> Optional[AttackSpec]:
        """R-FGSM for FGSM training, PGD-7 with 2-pixel steps from a random start
        for PGD training; predicted labels in both cases."""
        if self.adv_mode == "fgsm":
            return AttackSpec("rfgsm", self.adv_eps, label_source="predicted")
        if self.adv_mode == "pgd":
            return AttackSpec("pgd", self.adv_eps, alpha_pixels=2.0, iters=7, start="random",
                              label_source="predicted")
        return None


def lr_at(epoch: int, spec: TrainSpec) -> float:
    """Piecewise-constant schedule; a milestone takes effect at its own epoch."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    drops = sum(1 for m in spec.milestones if epoch >= m)
    # Round away the representation noise of repeated multiplication (0.1 * 0.1).
    return float(f"{spec.lr * spec.decay_factor**drops:.15g}")


class SGD:
    """Momentum SGD: ``v <- m v + (g + wd p)``, ``p <- p - lr v``.

    Weight decay applies only to parameters whose ``decay`` flag is set
    (batch-norm scale/shift and tReLU thresholds are built without it).
    """

    def __init__(self, params: Sequence[Parameter], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        sgd_momentum_step(self.params, self.velocity, lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def sgd_momentum_step(params: Sequence[Parameter], velocity: list, lr: float, momentum: float,
                      weight_decay: float) -> None:
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(f"non-finite gradient for {p.name or 'parameter'}")
    for i, p in enumerate(params):
        dt = p.dtype.type
        g = p.grad + dt(weight_decay) * p.data if (p.decay and weight_decay) else p.grad
        velocity[i] = dt(momentum) * velocity[i] + g
        p.data -= dt(lr) * velocity[i]


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, epoch: int, lr: float, loss: float, clean_acc: float,
               adv_acc: Optional[float] = None) -> None:
        if self.rows and epoch <= self.rows[-1]["epoch"]:
            raise ValueError("epochs must increase")
        self.rows.append(dict(epoch=epoch, lr=lr, loss=loss, clean_acc=clean_acc, adv_acc=adv_acc))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(LOG_FIELDS)
            for r in self.rows:
                w.writerow([r["epoch"], repr(r["lr"]), repr(r["loss"]), repr(r["clean_acc"]),
                            "" if r["adv_acc"] is None else repr(r["adv_acc"])])

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path, newline="") as f:
            for r in csv.DictReader(f):
                out.append(int(r["epoch"]), float(r["lr"]), float(r["loss"]), float(r["clean_acc"]),
                           float(r["adv_acc"]) if r["adv_acc"] else None)
        return out


def train_step(model, optimizer: SGD, x: np.ndarray, y: np.ndarray, lr: float) -> tuple[float, int]:
    """One SGD step on a batch; returns (loss, number correct)."""
    optimizer.zero_grad()
    with Tape() as tape:
        logits = model(Tensor(x), train=True)
        loss = ops.softmax_cross_entropy(logits, y)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became {value}")
    tape.backward(loss)
    optimizer.step(lr)
    return value, int((logits.data.argmax(axis=1) == y).sum())


def train(model, train_set: DatasetHandle, spec: TrainSpec, eval_set: Optional[DatasetHandle] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainLog:
    """Train ``model`` in place.

    In adversarial modes every batch is replaced by attack output (or
    extended with it when ``adv_mixed``); batch-norm statistics therefore track
    the adversarial batches.  ``clean_acc`` is measured on ``eval_set`` (or the
    training set) after each epoch.
    """
    rng = np.random.default_rng(spec.seed)
    opt = SGD(model.parameters(), spec.momentum, spec.weight_decay)
    attack = spec.attack_for_training()
    log_ = TrainLog()
    dtype = model.parameters()[0].dtype
    for epoch in range(spec.epochs):
        lr = lr_at(epoch, spec)
        total, seen = 0.0, 0
        for idx in batches(len(train_set), spec.batch_size, rng):
            xb = train_set.images[idx].astype(dtype, copy=False)
            yb = train_set.labels[idx]
            if spec.augment:
                xb = augment(xb, rng)
            if attack is not None:
                xa = generate(model, xb, yb, attack, rng)
                if spec.verify_constraints and constraint_violations(xa, xb, attack.eps):
                    raise AssertionError("adversarial training batch violates attack constraints")
                if spec.adv_mixed:
                    xb, yb = np.concatenate([xb, xa]), np.concatenate([yb, yb])
                else:
                    xb = xa
            loss, _ = train_step(model, opt, xb, yb, lr)
            total += loss * len(yb)
            seen += len(yb)
        target = eval_set if eval_set is not None else train_set
        if spec.eval_limit:
            target = target.take(slice(0, spec.eval_limit))
        clean = accuracy(model, target.images.astype(dtype, copy=False), target.labels)
        adv = None
        if spec.eval_attack is not None:
            adv = adversarial_accuracy(model, target.images.astype(dtype, copy=False), target.labels,
                                       spec.eval_attack, seed=spec.seed)
        log_.append(epoch, lr, total / max(seen, 1), clean, adv)
        log.info("epoch %d lr %.4g loss %.4f clean %.4f%s", epoch, lr, total / max(seen, 1), clean,
                 "" if adv is None else f" adv {adv:.4f}")
        if on_epoch is not None:
            on_epoch(log_.rows[-1])
    return log_


def parameter_groups(model) -> dict[str, list[str]]:
    """Names of parameters with and without weight decay."""
    groups: dict[str, list[str]] = {"decay": [], "no_decay": []}
    for name, p in model.named_parameters():
        groups["decay" if p.decay else "no_decay"].append(name)
    return groups


def save_log(log_: TrainLog, path) -> Path:
    path = Path(path)
    log_.to_csv(path)
    return path
