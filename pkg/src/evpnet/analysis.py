"""Error amplification across blocks, robustness sweeps, response-map export."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attacks import AttackSpec, EvalRow, accuracy, adversarial_accuracy, generate
from .tensor import Tensor

GAMMA_EPS = 1e-12
PGD_CURVE_ITERS = (1, 2, 5, 10, 20, 40)
SWEEP_FIELDS = ("attack", "eps", "iters", "accuracy")


@dataclass
class GammaTrace:
    """Per-tap normalized distances, one row per sample (``values`` is S x T)."""

    taps: list
    values: np.ndarray
    zero_denominator: np.ndarray  # S x T, True where the benign response was all zero

    @property
    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.values.std(axis=0)

    @property
    def flagged(self) -> list:
        """Taps where some sample had an all-zero benign response."""
        return [t for t, z in zip(self.taps, self.zero_denominator.any(axis=0)) if z]

    def to_csv(self, path) -> None:
        flags = self.zero_denominator.any(axis=0)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["tap", "index", "gamma_mean", "gamma_std", "zero_denominator"])
            for i, (t, m, s, z) in enumerate(zip(self.taps, self.mean, self.std, flags)):
                w.writerow([t, i, repr(float(m)), repr(float(s)), int(z)])


def gamma(benign: np.ndarray, adversarial: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample ``||x - x'|| / (||x|| + 1e-12)`` over flattened responses.

    Returns the ratios and a mask of samples whose benign norm is zero.
    """
    a = benign.reshape(len(benign), -1).astype(np.float64)
    b = adversarial.reshape(len(adversarial), -1).astype(np.float64)
    num = np.linalg.norm(a - b, axis=1)
    den = np.linalg.norm(a, axis=1)
    return num / (den + GAMMA_EPS), den == 0


def tap_responses(model, x: np.ndarray) -> list[np.ndarray]:
    _, taps = model.forward(Tensor(x), with_taps=True)
    return [t.data for t in taps]


def error_amplification(model, images: np.ndarray, labels: np.ndarray, spec: AttackSpec,
                        n_samples: int = 64, seed: int = 0, batch_size: int = 64,
                        adversarial: Optional[np.ndarray] = None) -> GammaTrace:
    """Sample ``n_samples`` images, attack them with ``spec`` and measure the
    normalized response distance at every tap.  ``adversarial`` bypasses the
    attack (it must match the sampled images one-to-one)."""
    rng = np.random.default_rng(seed)
    n = min(n_samples, len(labels))
    idx = np.sort(rng.choice(len(labels), n, replace=False))
    x, y = images[idx], labels[idx]
    rows, zeros = [], []
    for bi, i in enumerate(range(0, n, batch_size)):
        xb, yb = x[i : i + batch_size], y[i : i + batch_size]
        if adversarial is not None:
            xa = adversarial[i : i + batch_size]
        else:
            xa = generate(model, xb, yb, spec, np.random.default_rng([seed, bi]))
        per_tap = [gamma(b, a) for b, a in zip(tap_responses(model, xb), tap_responses(model, xa))]
        rows.append(np.stack([g for g, _ in per_tap], axis=1))
        zeros.append(np.stack([z for _, z in per_tap], axis=1))
    return GammaTrace(list(model.tap_names), np.concatenate(rows), np.concatenate(zeros))


def response_map(feature: np.ndarray) -> np.ndarray:
    """Channel max-out of a C x H x W response, min-max scaled to uint8.
    A constant map exports as all zeros."""
    m = np.asarray(feature, dtype=np.float64).max(axis=0)
    lo, hi = m.min(), m.max()
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.rint((m - lo) / (hi - lo) * 255).astype(np.uint8)


def write_pgm(pixels: np.ndarray, path) -> None:
    """Plain (ASCII) portable graymap: ``P2``, width height, maxval 255, rows."""
    h, w = pixels.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join(str(int(v)) for v in row) for row in pixels]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    if tokens[0] != "P2":
        raise ValueError(f"{path}: not a plain graymap")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4 : 4 + w * h], dtype=np.int64).reshape(h, w).astype(np.uint8)


def response_map_export(model, image: np.ndarray, block_index: int, out_path) -> np.ndarray:
    """Write the merged response of tap ``block_index`` for one C x H x W image."""
    names = model.tap_names
    # The final tap is a feature vector, not a map.
    if not 0 <= block_index < len(names) - 1:
        raise IndexError(f"block index {block_index} outside [0, {len(names) - 1})")
    taps = tap_responses(model, np.asarray(image)[None])
    pixels = response_map(taps[block_index][0])
    write_pgm(pixels, out_path)
    return pixels


@dataclass
class EvalReport:
    grid: list = field(default_factory=list)
    curve: list = field(default_factory=list)

    def rows(self) -> list:
        return self.grid + self.curve

    def to_csv(self, path, include_curve: bool = True) -> None:
        write_rows(self.rows() if include_curve else self.grid, path)


def write_rows(rows: Sequence[EvalRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for r in rows:
            w.writerow([r.attack, f"{r.eps:g}", r.iters, repr(float(r.accuracy))])


def robustness_sweep(model, images: np.ndarray, labels: np.ndarray, eps_list: Sequence[float],
                     families: Sequence[str] = ("fgsm", "rfgsm", "pgd"), seed: int = 0,
                     pgd_eps: float = 8.0, pgd_step: float = 2.0,
                     curve_iters: Optional[Sequence[int]] = PGD_CURVE_ITERS) -> EvalReport:
    """Accuracy for every (family, eps) pair plus a clean row, and a PGD curve
    over ``curve_iters`` at ``pgd_eps`` with ``pgd_step``-pixel steps.

    Grid PGD entries use 10 iterations of ``eps/4`` (at least one pixel-unit
    fraction, never zero).  eps=0 entries are clean accuracy by construction.
    """
    clean = accuracy(model, images, labels)
    report = EvalReport(grid=[EvalRow("clean", 0.0, 0, clean)])
    for fam in families:
        for eps in eps_list:
            if fam == "pgd":
                spec = AttackSpec("pgd", eps, alpha_pixels=max(eps / 4, 1e-3), iters=10)
            else:
                spec = AttackSpec(fam, eps)
            acc = clean if eps == 0 else adversarial_accuracy(model, images, labels, spec, seed=seed)
            report.grid.append(EvalRow(fam, float(eps), spec.effective_iters, acc))
    for t in curve_iters or ():
        spec = AttackSpec("pgd", pgd_eps, alpha_pixels=pgd_step, iters=t)
        report.curve.append(EvalRow(spec.label, float(pgd_eps), t,
                                    adversarial_accuracy(model, images, labels, spec, seed=seed)))
    return report
