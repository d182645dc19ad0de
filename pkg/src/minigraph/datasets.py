"""Seeded synthetic datasets; ships in-repo so runs need no downloads."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from .errors import ArgumentError
from .recordio import Example, pack


def blobs(n: int, classes: int = 2, dim: int = 2, seed: int = 0,
          radius: float = 3.0, spread: float = 1.0
          ) -> Tuple[np.ndarray, np.ndarray]:
    """Gaussian blobs around class centers on a circle.

    Returns (features float32 [n, dim], labels int64 [n]); class of
    example i is i mod classes.
    """
    if n < 1 or classes < 2 or dim < 2:
        raise ArgumentError("blobs needs n >= 1, classes >= 2, dim >= 2")
    rs = np.random.RandomState(seed)
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = np.zeros((classes, dim), dtype=np.float64)
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    labels = np.arange(n, dtype=np.int64) % classes
    feats = centers[labels] + spread * rs.randn(n, dim)
    return feats.astype(np.float32), labels


def pack_blobs(path: str, n: int, classes: int = 2, dim: int = 2,
               seed: int = 0, radius: float = 3.0, spread: float = 1.0) -> str:
    feats, labels = blobs(n, classes, dim, seed, radius, spread)
    pack((Example(int(l), f) for f, l in zip(feats, labels)), path)
    return path
