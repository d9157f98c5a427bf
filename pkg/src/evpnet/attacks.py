"""l_inf gradient-sign attacks (FGSM, R-FGSM, PGD) and robustness evaluation.

Inputs live in [0, 1].  :class:`AttackSpec` carries budgets in pixel units
(1/255 of the input range), the functions below take them already scaled.
Attacks use eval-mode forwards with frozen parameters, so neither weights,
gradient accumulators nor batch-norm statistics change.
"""

from __future__ import annotations

import contextlib
import re
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .tensor import NonFiniteError, Tape, Tensor

FAMILIES = ("fgsm", "rfgsm", "pgd")
_PRESET = re.compile(r"^(fgsm|rfgsm|r-fgsm|pgd)(?:-(\d+)(?:-(\d+(?:\.\d+)?))?)?$", re.I)


@dataclass(frozen=True)
class AttackSpec:
    """Attack family and budget.  ``eps_pixels``/``alpha_pixels`` are in 1/255
    units; ``alpha_pixels=None`` means ``eps / iters`` for PGD."""

    family: str = "pgd"
    eps_pixels: float = 8.0
    alpha_pixels: Optional[float] = None
    iters: int = 10
    start: str = "clean"
    label_source: str = "true"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}; expected {FAMILIES}")
        if self.eps_pixels < 0:
            raise ValueError("eps must be non-negative")
        if self.start not in ("clean", "random"):
            raise ValueError(f"start must be 'clean' or 'random', got {self.start!r}")
        if self.label_source not in ("true", "predicted"):
            raise ValueError(f"label_source must be 'true' or 'predicted', got {self.label_source!r}")
        if self.family == "pgd":
            if self.iters < 1:
                raise ValueError("PGD needs at least one iteration")
            if self.alpha_pixels is not None and self.alpha_pixels <= 0:
                raise ValueError("PGD step size must be positive")

    @property
    def eps(self) -> float:
        return self.eps_pixels / 255.0

    @property
    def alpha(self) -> float:
        if self.alpha_pixels is not None:
            return self.alpha_pixels / 255.0
        return self.eps / self.iters

    @property
    def effective_iters(self) -> int:
        return self.iters if self.family == "pgd" else 1

    @property
    def label(self) -> str:
        if self.family == "pgd":
            step = self.alpha_pixels if self.alpha_pixels is not None else self.eps_pixels / self.iters
            return f"pgd-{self.iters}-{step:g}"
        return self.family

    @classmethod
    def parse(cls, text: str, eps_pixels: float = 8.0, **kw) -> "AttackSpec":
        """Parse preset names such as ``FGSM``, ``R-FGSM``, ``PGD-40-2``.

        ``PGD-N`` without a step uses the 2-pixel default step.
        """
        m = _PRESET.match(text.strip())
        if not m:
            raise ValueError(f"cannot parse attack preset {text!r}")
        fam = m.group(1).lower().replace("-", "")
        if fam != "pgd":
            return cls(family=fam, eps_pixels=eps_pixels, **kw)
        iters = int(m.group(2) or 10)
        step = float(m.group(3) or 2)
        return cls(family="pgd", eps_pixels=eps_pixels, alpha_pixels=step, iters=iters, **kw)


def input_gradient(model, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(mean cross-entropy)/dx for an eval-mode forward."""
    xt = Tensor(x, requires_grad=True)
    frozen = model.frozen() if hasattr(model, "frozen") else contextlib.nullcontext()
    with frozen, Tape() as tape:
        loss = ops.softmax_cross_entropy(model(xt), labels)
    (g,) = tape.grad(loss, [xt])
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite input gradient during attack")
    return g


def _project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    eps = x.dtype.type(eps)
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0, 1)


def fgsm(model, x: np.ndarray, labels: np.ndarray, eps: float) -> np.ndarray:
    """``clip(x + eps * sign(grad), 0, 1)``."""
    x = np.asarray(x)
    eps = x.dtype.type(eps)
    g = input_gradient(model, x, labels)
    return np.clip(x + eps * np.sign(g).astype(x.dtype), 0, 1)


def rfgsm(model, x: np.ndarray, labels: np.ndarray, eps: float,
          rng: np.random.Generator) -> np.ndarray:
    """FGSM from a uniformly random start inside the eps-ball around ``x``."""
    x = np.asarray(x)
    eps = x.dtype.type(eps)
    x0 = np.clip(x + rng.uniform(-eps, eps, x.shape).astype(x.dtype), 0, 1)
    g = input_gradient(model, x0, labels)
    return _project(x0 + eps * np.sign(g).astype(x.dtype), x, eps)


def pgd(model, x: np.ndarray, labels: np.ndarray, eps: float, alpha: float, iters: int,
        start: str = "clean", rng: Optional[np.random.Generator] = None,
        callback: Optional[Callable[[int, np.ndarray], None]] = None) -> np.ndarray:
    """``iters`` sign-gradient steps of size ``alpha``, each projected back to
    the eps-ball around ``x`` and to [0, 1]."""
    x = np.asarray(x)
    eps, alpha = x.dtype.type(eps), x.dtype.type(alpha)
    if start == "random":
        if rng is None:
            raise ValueError("random start needs an rng")
        x_adv = np.clip(x + rng.uniform(-eps, eps, x.shape).astype(x.dtype), 0, 1)
    else:
        x_adv = x.copy()
    for i in range(iters):
        g = input_gradient(model, x_adv, labels)
        x_adv = _project(x_adv + alpha * np.sign(g).astype(x.dtype), x, eps)
        if callback is not None:
            callback(i, x_adv)
    return x_adv


def predicted_labels(model, x: np.ndarray) -> np.ndarray:
    return np.argmax(model(Tensor(x)).data, axis=1)


def generate(model, x: np.ndarray, labels: np.ndarray, spec: AttackSpec,
             rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Adversarial batch for ``spec``; labels may be replaced by predictions."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if spec.label_source == "predicted":
        labels = predicted_labels(model, x)
    if spec.family == "fgsm":
        return fgsm(model, x, labels, spec.eps)
    if spec.family == "rfgsm":
        return rfgsm(model, x, labels, spec.eps, rng)
    return pgd(model, x, labels, spec.eps, spec.alpha, spec.iters, spec.start, rng)


def constraint_violations(x_adv: np.ndarray, x: np.ndarray, eps: float) -> int:
    """Number of pixels breaking the eps-ball (one-ulp slack) or [0, 1]."""
    slack = np.spacing(x.dtype.type(1))
    delta = np.abs(x_adv.astype(np.float64) - x.astype(np.float64))
    bad = (delta > float(x.dtype.type(eps)) + float(slack)) | (x_adv < 0) | (x_adv > 1)
    return int(bad.sum())


def accuracy(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    if len(labels) == 0:
        return 0.0
    correct = 0
    for i in range(0, len(labels), batch_size):
        logits = model(Tensor(images[i : i + batch_size])).data
        correct += int((logits.argmax(axis=1) == labels[i : i + batch_size]).sum())
    return correct / len(labels)


def adversarial_accuracy(model, images: np.ndarray, labels: np.ndarray, spec: AttackSpec,
                         seed: int = 0, batch_size: int = 128, source=None,
                         keep: Optional[list] = None) -> float:
    """Accuracy of ``model`` on examples crafted against ``source`` (default:
    the model itself).  Batches are seeded by index so results are order-stable."""
    source = model if source is None else source
    correct = 0
    for bi, i in enumerate(range(0, len(labels), batch_size)):
        xb, yb = images[i : i + batch_size], labels[i : i + batch_size]
        rng = np.random.default_rng([seed, bi])
        xa = generate(source, xb, yb, spec, rng)
        if keep is not None:
            keep.append(xa)
        logits = model(Tensor(xa)).data
        correct += int((logits.argmax(axis=1) == yb).sum())
    return correct / max(len(labels), 1)


def transfer_attack_eval(source_model, target_model, images: np.ndarray, labels: np.ndarray,
                         spec: Optional[AttackSpec] = None, seed: int = 0) -> float:
    """Black-box accuracy: FGSM examples from ``source_model`` scored on ``target_model``."""
    spec = spec or AttackSpec(family="fgsm")
    cs, ct = source_model.config, target_model.config
    if (cs.in_channels, cs.input_size) != (ct.in_channels, ct.input_size):
        raise ValueError("source and target models take different input shapes")
    return adversarial_accuracy(target_model, images, labels, spec, seed=seed, source=source_model)


@dataclass
class EvalRow:
    attack: str
    eps: float
    iters: int
    accuracy: float


def evaluate_robustness(model, images: np.ndarray, labels: np.ndarray,
                        specs: Sequence[AttackSpec], seed: int = 0) -> list[EvalRow]:
    """Clean accuracy plus one row per attack (true labels unless an AttackSpec asks for predicted ones)."""
    rows = [EvalRow("clean", 0.0, 0, accuracy(model, images, labels))]
    for spec in specs:
        acc = adversarial_accuracy(model, images, labels, spec, seed=seed)
        rows.append(EvalRow(spec.label, spec.eps_pixels, spec.effective_iters, acc))
    return rows
