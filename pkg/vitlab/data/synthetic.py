"""Two-class texture proxy where only fine-scale detail separates the
classes: class 1 carries a 2x2-period checkerboard inside one 8x8 region."""

from __future__ import annotations

import numpy as np

from vitlab.common import ConfigError

from .bundle import DatasetBundle, Split
from .transforms import to_three_channels

SIZE = 28
REGION = 8
AMPLITUDE = 0.25
SPLIT_FRACTIONS = (0.7, 0.1)


def _background(rng: np.random.Generator, noise: float) -> np.ndarray:
    """Random linear gradient within [0.3, 0.7] plus Gaussian noise."""
    coords = np.linspace(-0.5, 0.5, SIZE)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    base = rng.uniform(0.4, 0.6)
    slope_y, slope_x = rng.uniform(-0.1, 0.1, size=2)
    field = base + slope_y * yy + slope_x * xx
    return field + rng.normal(0.0, noise, size=field.shape)


def _checkerboard() -> np.ndarray:
    i, j = np.indices((SIZE, SIZE))
    return AMPLITUDE * np.where((i + j) % 2 == 0, 1.0, -1.0)


def generate_synthetic_texture(
    n_per_class: int, seed: int = 0, noise: float = 0.1
) -> DatasetBundle:
    """``28 x 28 x 3`` images, split 70/10/20 per class."""
    if n_per_class < 8:
        raise ConfigError(f"n_per_class must be >= 8, got {n_per_class}")
    rng = np.random.default_rng(seed)
    board = _checkerboard()

    per_class = []
    for label in (0, 1):
        images = np.empty((n_per_class, SIZE, SIZE), dtype=np.float64)
        for n in range(n_per_class):
            image = _background(rng, noise)
            if label == 1:
                top, left = rng.integers(0, SIZE - REGION + 1, size=2)
                window = (slice(top, top + REGION), slice(left, left + REGION))
                image[window] += board[window]
            images[n] = image
        per_class.append(np.clip(images, 0.0, 1.0).astype(np.float32))

    n_train = int(round(SPLIT_FRACTIONS[0] * n_per_class))
    n_val = int(round(SPLIT_FRACTIONS[1] * n_per_class))
    bounds = {
        "train": slice(0, n_train),
        "val": slice(n_train, n_train + n_val),
        "test": slice(n_train + n_val, n_per_class),
    }
    splits = {}
    for name, window in bounds.items():
        images = np.concatenate([cls_images[window] for cls_images in per_class])
        labels = np.concatenate(
            [np.full(len(cls_images[window]), c) for c, cls_images in enumerate(per_class)]
        ).astype(np.int64)
        order = rng.permutation(len(labels))
        splits[name] = Split(to_three_channels(images[order][..., None]), labels[order])

    return DatasetBundle(
        name="synthetic-texture",
        dims=2,
        splits=splits,
        num_classes=2,
        modality="synthetic",
    )
