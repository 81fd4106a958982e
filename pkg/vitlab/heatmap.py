"""PNG export of class-token attention heatmaps."""

from __future__ import annotations

from dataclasses import dataclass
import logging
from pathlib import Path
from typing import Union

import numpy as np

from .attention_maps import AttentionMap, extract_attention_map
from .checkpoint import Checkpoint, load_checkpoint
from .common import MissingDependencyException, UnsupportedOperationError
from .model import VisionTransformer
from .patches import patch_grid_overlay

logger = logging.getLogger(__name__)


@dataclass
class HeatmapExport:
    heatmap: Path
    image: Path
    grid: Path
    attention: AttentionMap


def _to_uint8(array: np.ndarray) -> np.ndarray:
    return np.round(np.clip(array, 0.0, 1.0) * 255).astype(np.uint8)


def _save_png(array: np.ndarray, path: Path) -> None:
    try:
        from PIL import Image
    except ImportError:
        raise MissingDependencyException("imaging", "Pillow")

    pixels = _to_uint8(array)
    if pixels.ndim == 3 and pixels.shape[-1] == 1:
        pixels = pixels[..., 0]
    Image.fromarray(pixels).save(path, format="PNG")


def export_attention_heatmap(
    checkpoint: Union[Checkpoint, str, Path],
    image: np.ndarray,
    path: Union[str, Path],
) -> HeatmapExport:
    """Write the heatmap to ``path`` and the input image and its patch-grid
    overlay next to it as ``<stem>.input.png`` and ``<stem>.grid.png``.

    All three are 8-bit PNGs at the input resolution.
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    config = checkpoint.config
    if config.patch.dims != 2:
        raise UnsupportedOperationError(
            "Attention heatmaps can only be exported for 2D checkpoints"
        )
    model = VisionTransformer.from_checkpoint(checkpoint)
    attention = extract_attention_map(np.asarray(image, dtype=np.float32), model)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image_path = path.with_name(f"{path.stem}.input.png")
    grid_path = path.with_name(f"{path.stem}.grid.png")
    _save_png(attention.heatmap, path)
    _save_png(image, image_path)
    _save_png(patch_grid_overlay(np.asarray(image), config.patch.p), grid_path)
    logger.info("Heatmap for p=%d written to %s", config.patch.p, path)
    return HeatmapExport(heatmap=path, image=image_path, grid=grid_path, attention=attention)
