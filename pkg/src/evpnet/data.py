"""Datasets: CIFAR-10 binary records, a synthetic shape/texture set, splits.

CIFAR-10 binary layout, one 3073-byte record per image: a label byte, then
three row-major 32x32 planes (R, G, B).  Synthetic and exported datasets use
the same layout.  Pixels are scaled to [0, 1]; normalization is left to the
model's first layer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

RECORD = 3073
SIDE = 32


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetHandle:
    images: np.ndarray  # N x 3 x 32 x 32, float32 in [0, 1]
    labels: np.ndarray  # N, int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "DatasetHandle":
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def load_cifar10(paths: Iterable, split: str = "train") -> DatasetHandle:
    """Parse one or more CIFAR-10 binary batch files."""
    images, labels = [], []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size % RECORD:
            whole = raw.size - raw.size % RECORD
            raise DatasetFormatError(
                f"{path}: truncated record at byte offset {whole} ({raw.size} bytes is not a multiple of {RECORD})")
        recs = raw.reshape(-1, RECORD)
        bad = np.flatnonzero(recs[:, 0] > 9)
        if bad.size:
            raise DatasetFormatError(
                f"{path}: label byte {recs[bad[0], 0]} > 9 at byte offset {int(bad[0]) * RECORD}")
        labels.append(recs[:, 0].astype(np.int64))
        images.append(recs[:, 1:].reshape(-1, 3, SIDE, SIDE))
    if not images:
        raise DatasetFormatError("no input files")
    pixels = np.concatenate(images)
    return DatasetHandle((pixels / np.float32(255)).astype(np.float32), np.concatenate(labels), split)


def cifar10_paths(root, split: str = "train") -> list[Path]:
    root = Path(root)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    paths = [root / n for n in names]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing CIFAR-10 files: {', '.join(missing)}")
    return paths


def to_bytes(images: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(images, dtype=np.float64) * 255).clip(0, 255).astype(np.uint8)


def write_records(handle: DatasetHandle, path) -> None:
    """Write ``handle`` in the CIFAR-10 binary record layout."""
    if handle.images.shape[1:] != (3, SIDE, SIDE):
        raise ValueError(f"record format needs 3x32x32 images, got {handle.images.shape[1:]}")
    if handle.num_classes > 256:
        raise ValueError("labels must fit in one byte")
    recs = np.empty((len(handle), RECORD), dtype=np.uint8)
    recs[:, 0] = handle.labels
    recs[:, 1:] = to_bytes(handle.images).reshape(len(handle), -1)
    recs.tofile(path)


def synth_shapes(n: int, seed: int = 0, noise_level: float = 0.1, split: str = "train") -> DatasetHandle:
    """Two balanced classes: filled rectangles (0) and ellipses (1).

    Each shape has a random centre (+-3 px), half-size (8-12 px), aspect and
    rotation (+-22.5 deg), random foreground/background gray levels, and an
    overlaid high-frequency texture (a fine grating of random orientation plus
    pixel noise) of amplitude ``noise_level``.  Deterministic in ``seed``.
    """
    if n < 2:
        raise ValueError("synth_shapes needs n >= 2")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:SIDE, 0:SIDE].astype(np.float64) + 0.5
    images = np.empty((n, 3, SIDE, SIDE), dtype=np.float32)
    for i in range(n):
        cy, cx = rng.uniform(13, 19, 2)
        a = rng.uniform(8, 12)
        b = a * rng.uniform(0.6, 1.0)
        phi = rng.uniform(-np.pi / 8, np.pi / 8)
        u = (xx - cx) * np.cos(phi) + (yy - cy) * np.sin(phi)
        v = -(xx - cx) * np.sin(phi) + (yy - cy) * np.cos(phi)
        if labels[i] == 0:
            mask = (np.abs(u) <= a) & (np.abs(v) <= b)
        else:
            mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        bg = rng.uniform(0.0, 0.3)
        fg = rng.uniform(0.7, 1.0)
        img = np.where(mask, fg, bg)
        img = np.broadcast_to(img, (3, SIDE, SIDE)).copy()
        if noise_level > 0:
            freq = rng.uniform(0.3, 0.5)
            theta = rng.uniform(0, np.pi)
            grating = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + rng.uniform(0, 2 * np.pi))
            texture = 0.5 * grating + 0.5 * rng.uniform(-1, 1, (3, SIDE, SIDE))
            img = img + noise_level * texture
        images[i] = np.clip(img, 0, 1)
    return DatasetHandle(images, labels.astype(np.int64), split, num_classes=2)


def subset(handle: DatasetHandle, n: int, seed: int = 0) -> DatasetHandle:
    """Class-balanced random subset of size ``n`` (remainder spread over the
    lowest class ids)."""
    k = handle.num_classes
    per = [n // k + (1 if c < n % k else 0) for c in range(k)]
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(k):
        idx = np.flatnonzero(handle.labels == c)
        if per[c] > idx.size:
            raise ValueError(f"subset: class {c} has {idx.size} examples, {per[c]} requested")
        picks.append(rng.choice(idx, per[c], replace=False))
    order = np.concatenate(picks)
    rng.shuffle(order)
    return handle.take(order)


def normalize_stats(handle: DatasetHandle) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and (population) std over all pixels."""
    x = handle.images.astype(np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def augment(images: np.ndarray, rng: np.random.Generator, flip: bool = True, pad: int = 4) -> np.ndarray:
    """Random horizontal flip and ``pad``-pixel pad-and-crop."""
    n, c, h, w = images.shape
    out = images.copy()
    if flip:
        mask = rng.random(n) < 0.5
        out[mask] = out[mask, :, :, ::-1]
    if pad:
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy = rng.integers(0, 2 * pad + 1, n)
        dx = rng.integers(0, 2 * pad + 1, n)
        for i in range(n):
            out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    return out


def batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def load_dataset(source: str, split: str, *, path: Optional[str] = None, n: Optional[int] = None,
                 noise: float = 0.1, seed: int = 0) -> DatasetHandle:
    """Dataset by name: ``synth`` or ``cifar10`` (binary batches under ``path``)."""
    if source == "synth":
        size = n if n is not None else (2000 if split == "train" else 500)
        # Disjoint seeds keep train and test draws independent.
        return synth_shapes(size, seed=seed * 2 + (0 if split == "train" else 1), noise_level=noise,
                            split=split)
    if source == "cifar10":
        if path is None:
            raise ValueError("cifar10 source needs data.path")
        handle = load_cifar10(cifar10_paths(path, split), split)
        return subset(handle, n, seed) if n else handle
    raise ValueError(f"unknown data source {source!r}")


def label_counts(labels: Sequence[int], k: int) -> np.ndarray:
    return np.bincount(np.asarray(labels), minlength=k)
