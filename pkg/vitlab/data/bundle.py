from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator

import numpy as np

from vitlab.common import ConfigError, DatasetFormatError

SPLITS = ("train", "val", "test")


@dataclass
class Split:
    images: np.ndarray  # N x H x W x C or N x D x H x W x C, values in [0, 1]
    labels: np.ndarray  # N ints

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class DatasetBundle:
    name: str
    dims: int
    splits: Dict[str, Split] = field(default_factory=dict)
    num_classes: int = 2
    modality: str = ""

    def __getitem__(self, split: str) -> Split:
        return self.splits[split]

    @property
    def image_shape(self) -> tuple:
        return self.splits["train"].images.shape[1:]

    @property
    def sizes(self) -> Dict[str, int]:
        return {name: len(split) for name, split in self.splits.items()}

    def validate(self) -> None:
        shapes = set()
        for name in SPLITS:
            if name not in self.splits:
                raise DatasetFormatError(f"{self.name}: missing split '{name}'")
            split = self.splits[name]
            if len(split.images) != len(split.labels):
                raise DatasetFormatError(
                    f"{self.name}/{name}: {len(split.images)} images but "
                    f"{len(split.labels)} labels"
                )
            if len(split.labels) and (
                split.labels.min() < 0 or split.labels.max() >= self.num_classes
            ):
                raise DatasetFormatError(
                    f"{self.name}/{name}: labels outside [0, {self.num_classes})"
                )
            if split.images.ndim != self.dims + 2:
                raise DatasetFormatError(
                    f"{self.name}/{name}: images of shape {split.images.shape} "
                    f"are not {self.dims}D channel-last"
                )
            shapes.add(split.images.shape[1:])
        if len(shapes) > 1:
            raise DatasetFormatError(
                f"{self.name}: splits disagree on image shape: {sorted(shapes)}"
            )

    def map_images(self, fn) -> "DatasetBundle":
        return DatasetBundle(
            name=self.name,
            dims=self.dims,
            splits={
                name: Split(fn(split.images), split.labels)
                for name, split in self.splits.items()
            },
            num_classes=self.num_classes,
            modality=self.modality,
        )

    def subset(self, split: str, n: int) -> "DatasetBundle":
        """Keep the first ``n`` samples of one split."""
        splits = dict(self.splits)
        source = splits[split]
        splits[split] = Split(source.images[:n], source.labels[:n])
        return DatasetBundle(self.name, self.dims, splits, self.num_classes, self.modality)


@dataclass
class Batch:
    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


def batches(
    split: Split,
    batch_size: int,
    shuffle_seed: int = 0,
    epoch: int = 0,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Batches over a seeded per-epoch permutation; the last may be short."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(split)
    if n == 0:
        raise DatasetFormatError("Cannot batch an empty split")
    if shuffle:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(idx, split.images[idx], split.labels[idx])
