"""Datasets: a synthetic centred-shapes task and the on-disk dataset layout.

On disk a dataset is a directory of ``PCNT`` tensor files named
``000000.pcnt``, ``000001.pcnt``, ... plus ``labels.txt`` with one integer per
line in the same order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import read_tensor, write_tensor

SHAPES = ("disk", "ring", "box", "square", "hbar", "vbar", "diag", "antidiag", "plus", "cross")


@dataclass
class Dataset:
    images: np.ndarray  # (n, X, Y, S)
    labels: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.labels)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return (Dataset(self.images[:n_first], self.labels[:n_first]),
                Dataset(self.images[n_first:], self.labels[n_first:]))

    def subset(self, n: int, seed: int | None = None) -> "Dataset":
        if seed is None:
            idx = np.arange(min(n, len(self)))
        else:
            idx = np.sort(np.random.default_rng(seed).choice(len(self), size=min(n, len(self)), replace=False))
        return Dataset(self.images[idx], self.labels[idx])

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(self.images):
            write_tensor(d / f"{i:06d}.pcnt", img)
        (d / "labels.txt").write_text("".join(f"{int(v)}\n" for v in self.labels))

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        labels_file = d / "labels.txt"
        if not labels_file.exists():
            raise FileNotFoundError(f"{labels_file} not found")
        labels = [int(v) for v in labels_file.read_text().split()]
        files = sorted(d.glob("*.pcnt"))
        if len(files) != len(labels):
            raise ValueError(f"{d}: {len(files)} tensor files but {len(labels)} labels")
        if not files:
            raise ValueError(f"{d}: empty dataset")
        return cls(np.stack([read_tensor(f) for f in files]), np.array(labels))


def _shape_mask(kind: str, xx, yy, r: float, w: float) -> np.ndarray:
    ax, ay = np.abs(xx), np.abs(yy)
    rad = np.hypot(xx, yy)
    if kind == "disk":
        return rad <= r
    if kind == "ring":
        return np.abs(rad - r) <= w
    if kind == "box":
        m = np.maximum(ax, ay)
        return np.abs(m - r) <= w
    if kind == "square":
        return np.maximum(ax, ay) <= r * 0.8
    if kind == "hbar":
        return (ay <= w) & (ax <= r)
    if kind == "vbar":
        return (ax <= w) & (ay <= r)
    if kind == "diag":
        return (np.abs(xx - yy) <= w * 1.4) & (rad <= r)
    if kind == "antidiag":
        return (np.abs(xx + yy) <= w * 1.4) & (rad <= r)
    if kind == "plus":
        return ((ax <= w) | (ay <= w)) & (np.maximum(ax, ay) <= r)
    if kind == "cross":
        return ((np.abs(xx - yy) <= w * 1.4) | (np.abs(xx + yy) <= w * 1.4)) & (rad <= r)
    raise ValueError(kind)


def synthetic_shapes(n: int, size: int = 24, channels: int = 3, classes: int = 10, seed: int = 0,
                     jitter: float = 3.0, noise: float = 0.35) -> Dataset:
    """Centred shapes on noisy backgrounds; the class is the shape.

    Objects sit near the image centre (uniform jitter of ``jitter`` pixels),
    with random size, stroke width and colour.  Backgrounds mix white noise
    with a random smooth gradient.
    """
    if classes > len(SHAPES):
        raise ValueError(f"at most {len(SHAPES)} classes")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    coords = np.arange(size) - (size - 1) / 2
    gx, gy = np.meshgrid(coords, coords, indexing="ij")
    images = np.empty((n, size, size, channels), dtype=np.float32)
    for k in range(n):
        cx, cy = rng.uniform(-jitter, jitter, size=2)
        r = rng.uniform(0.22, 0.32) * size
        w = rng.uniform(0.9, 1.6)
        m = _shape_mask(SHAPES[labels[k]], gx - cx, gy - cy, r, w).astype(np.float32)
        colour = rng.uniform(0.6, 1.0, size=channels) * rng.choice([-1.0, 1.0])
        slope = rng.normal(0, 0.03, size=(2, channels))
        bg = gx[..., None] * slope[0] + gy[..., None] * slope[1]
        images[k] = m[..., None] * colour + bg + rng.normal(0, noise, size=(size, size, channels))
    return Dataset(images, labels)
