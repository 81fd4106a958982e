"""Class-token attention heatmaps from the final encoder layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import zoom

from . import autodiff as ad
from .common import MetricError, UnsupportedOperationError
from .evaluation import PredictionSet, predict
from .model import VisionTransformer


@dataclass
class AttentionMap:
    heatmap: np.ndarray  # H x W in [0, 1]
    grid: np.ndarray  # (H/p) x (W/p), class-token mass per patch
    prediction: int
    probabilities: np.ndarray


def extract_attention_map(image: np.ndarray, model: VisionTransformer) -> AttentionMap:
    """Head-averaged class-token row of the last layer, upsampled to the
    input resolution and min-max normalised.

    A single-patch model yields a constant map of ones.
    """
    spec = model.config.patch
    if spec.dims != 2:
        raise UnsupportedOperationError("Attention maps are only defined for 2D models")
    with ad.no_grad():
        result = model.forward(image, return_attention=True)
    weights = result.attention[-1][0]  # (h, T, T)
    cls_row = weights[:, 0, 1:].mean(axis=0).astype(np.float64)
    grid = cls_row.reshape(spec.grid)

    gh, gw = spec.grid
    upsampled = zoom(
        grid, (spec.H / gh, spec.W / gw), order=1, mode="nearest", grid_mode=True
    )
    low, high = upsampled.min(), upsampled.max()
    if high - low <= np.finfo(np.float64).eps * max(1.0, abs(high)):
        heatmap = np.ones((spec.H, spec.W))
    else:
        heatmap = (upsampled - low) / (high - low)

    logits = result.logits.data[0].astype(np.float64)
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    return AttentionMap(
        heatmap=heatmap,
        grid=grid,
        prediction=int(np.argmax(probs)),
        probabilities=probs,
    )


def select_contrast_samples(preferred: PredictionSet, baseline: PredictionSet) -> np.ndarray:
    """Indices of the samples ``baseline`` misclassifies and ``preferred``
    classifies correctly, in split order."""
    if not np.array_equal(preferred.indices, baseline.indices):
        raise MetricError("Prediction sets disagree on sample order")
    if not np.array_equal(preferred.labels, baseline.labels):
        raise MetricError("Prediction sets disagree on labels")
    labels = preferred.labels
    chosen = (preferred.predictions == labels) & (baseline.predictions != labels)
    return preferred.indices[chosen]


def find_contrast_samples(
    model: VisionTransformer,
    baseline: VisionTransformer,
    images: np.ndarray,
    labels: np.ndarray,
    batch_size: int = 128,
) -> np.ndarray:
    """Run both models over ``images`` and select the samples only ``model``
    gets right, e.g. a p=2 model against a p=28 baseline."""
    return select_contrast_samples(
        predict(model, images, labels, batch_size),
        predict(baseline, images, labels, batch_size),
    )
