"""Procedural toy image datasets in [-1, 1]."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

KINDS = ("shapes", "blobs", "checkers")
RESOLUTIONS = (8, 16, 32)


@dataclass
class ToyDataset:
    images: np.ndarray  # (n, h, w)
    labels: np.ndarray  # (n,) int
    kind: str
    n_classes: int

    def __len__(self) -> int:
        return len(self.images)


def _off_center_origin(rng, res: int, size: int) -> tuple[int, int]:
    # keep the column span strictly on one side of the vertical mirror axis
    half = res // 2
    row = int(rng.integers(0, res - size + 1))
    if rng.random() < 0.5:
        col = int(rng.integers(0, half - size + 1))
    else:
        col = int(rng.integers(half, res - size + 1))
    return row, col


def _shapes(n: int, res: int, rng: np.random.Generator):
    yy, xx = np.mgrid[0:res, 0:res]
    images = np.full((n, res, res), -1.0)
    labels = np.zeros(n, dtype=np.int64)
    max_size = max(2, res // 2 - 1)
    for i in range(n):
        count = int(rng.integers(1, 4))
        labels[i] = count - 1
        for _ in range(count):
            size = int(rng.integers(2, max_size + 1))
            r0, c0 = _off_center_origin(rng, res, size)
            if rng.random() < 0.5:
                images[i, r0 : r0 + size, c0 : c0 + size] = 1.0
            else:
                rad = size / 2.0
                cy, cx = r0 + rad - 0.5, c0 + rad - 0.5
                disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad**2
                images[i][disc] = 1.0
    return images, labels, 3


def _blobs(n: int, res: int, rng: np.random.Generator):
    yy, xx = np.mgrid[0:res, 0:res] / res
    images = np.empty((n, res, res))
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        count = int(rng.integers(1, 4))
        labels[i] = count - 1
        field = np.zeros((res, res))
        for _ in range(count):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            width = rng.uniform(0.06, 0.18)
            field += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        images[i] = np.clip(field, 0.0, 1.0) * 2.0 - 1.0
    return images, labels, 3


def _checkers(n: int, res: int, rng: np.random.Generator):
    yy, xx = np.mgrid[0:res, 0:res]
    periods = [p for p in (1, 2, 4) if p <= res // 2]
    images = np.empty((n, res, res))
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        j = int(rng.integers(0, len(periods)))
        p = periods[j]
        oy, ox = rng.integers(0, 2 * p, size=2)
        board = (((yy + oy) // p) + ((xx + ox) // p)) % 2
        images[i] = board * 2.0 - 1.0
        labels[i] = j
    return images, labels, len(periods)


def gen_toy_dataset(kind: str, n: int, res: int, seed: int) -> ToyDataset:
    if kind not in KINDS:
        raise DomainError(f"unknown dataset kind {kind!r}", known=KINDS)
    if n < 1:
        raise DomainError("dataset size must be positive", n=n)
    if res not in RESOLUTIONS:
        raise DomainError("unsupported resolution", res=res, supported=RESOLUTIONS)
    rng = np.random.default_rng(seed)
    images, labels, n_classes = {"shapes": _shapes, "blobs": _blobs, "checkers": _checkers}[kind](n, res, rng)
    return ToyDataset(images, labels, kind, n_classes)
