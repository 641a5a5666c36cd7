"""Procedural 16x16 grayscale shapes in [-1, 1]."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import IMAGE_SIDE
from .errors import ContractError

CLASS_NAMES = ("disc", "square", "horizontal_stripes", "diagonal_stripes")
STRIPE_CLASSES = frozenset({2, 3})


@dataclass
class ShapesDataset:
    images: np.ndarray  # (N, 256)
    labels: np.ndarray  # (N,) int
    stripes: np.ndarray  # (N,) bool

    def __len__(self) -> int:
        return len(self.labels)


def _draw(label: int, rng: np.random.Generator, side: int = IMAGE_SIDE) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    if label == 0:
        cy, cx = rng.uniform(6.0, 9.0, size=2)
        r = rng.uniform(3.0, 5.0)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif label == 1:
        half = rng.integers(3, 6)
        cy, cx = rng.integers(half + 1, side - half - 1, size=2)
        mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    elif label == 2:
        period = rng.integers(3, 5)
        mask = ((yy + rng.integers(0, period)) % period) < period / 2
    elif label == 3:
        period = rng.integers(3, 5)
        mask = ((yy + xx + rng.integers(0, period)) % period) < period / 2
    else:
        raise ValueError(f"unknown class {label}")
    img = np.where(mask, 1.0, -1.0)
    img = img + rng.normal(0.0, 0.05, size=img.shape)
    return np.clip(img, -1.0, 1.0)


def make_shapes(n_per_class: int, rng: np.random.Generator | int) -> ShapesDataset:
    """``n_per_class`` images for each of the four classes, class-major order."""
    if n_per_class < 1:
        raise ContractError("n_per_class must be at least 1")
    rng = np.random.default_rng(rng)
    images, labels = [], []
    for label in range(len(CLASS_NAMES)):
        for _ in range(n_per_class):
            images.append(_draw(label, rng).reshape(-1))
            labels.append(label)
    labels = np.asarray(labels, dtype=np.int64)
    stripes = np.isin(labels, sorted(STRIPE_CLASSES))
    return ShapesDataset(np.stack(images), labels, stripes)
