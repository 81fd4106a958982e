"""Adapting pretrained checkpoints to new patch sizes, 3D inputs and heads.

Every function returns a new ``Checkpoint``; tensors that a step does not
touch are shared with the input unchanged. Metadata is updated for the
fields a step owns (``patch_size``, ``dims``/``extents``, ``grid``,
``num_classes``), so intermediate checkpoints may not validate until the
whole plan has been applied.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
import math
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import zoom

from .checkpoint import Checkpoint
from .common import CheckpointError, ConfigError, PatchSizeError, PatchSpec, ShapeError
from .model import trunc_normal

logger = logging.getLogger(__name__)

BILINEAR = "bilinear"
TRILINEAR = "trilinear"


def _resize(array: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Align-corners linear resampling of the leading axes of ``array``."""
    factors = [out / src for out, src in zip(shape, array.shape)]
    factors += [1.0] * (array.ndim - len(shape))
    resized = zoom(array.astype(np.float64), factors, order=1, mode="nearest")
    expected = tuple(shape) + array.shape[len(shape) :]
    if resized.shape != expected:
        raise ShapeError(f"Resampling produced {resized.shape}, expected {expected}")
    return resized


def resample_patch_embedding_2d(
    ckpt: Checkpoint, target_p: int, rescale: bool = True
) -> Checkpoint:
    """Bilinearly resize the patch-embedding kernel to ``target_p``.

    With ``rescale`` the kernel is multiplied by ``(p_src / p_tgt) ** 2`` so
    the response to a constant patch is preserved.
    """
    if target_p <= 0:
        raise PatchSizeError(f"Target patch size must be positive, got {target_p}")
    kernel = ckpt["patch_embed.weight"]
    if kernel.ndim != 4:
        raise ShapeError(
            f"Expected a 2D patch-embedding kernel (p, p, C, d), got {kernel.shape}"
        )
    if kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"Patch-embedding kernel is not square: {kernel.shape}")
    source_p = kernel.shape[0]
    if target_p == source_p:
        return ckpt

    resized = _resize(kernel, (target_p, target_p))
    if rescale:
        resized *= (source_p / target_p) ** 2
    logger.info("Resampled patch embedding %d -> %d", source_p, target_p)
    return ckpt.replace(
        {"patch_embed.weight": resized.astype(kernel.dtype)}, patch_size=target_p
    )


def reinit_patch_embedding(
    ckpt: Checkpoint, target_p: int, seed: int = 0, std: float = 0.02
) -> Checkpoint:
    """Fresh truncated-normal kernel at ``target_p``; the bias is kept."""
    if target_p <= 0:
        raise PatchSizeError(f"Target patch size must be positive, got {target_p}")
    kernel = ckpt["patch_embed.weight"]
    dims = kernel.ndim - 2
    if kernel.shape[:dims] == (target_p,) * dims:
        return ckpt
    shape = (target_p,) * dims + kernel.shape[dims:]
    fresh = trunc_normal(shape, np.random.default_rng(seed), std=std, dtype=kernel.dtype)
    return ckpt.replace({"patch_embed.weight": fresh}, patch_size=target_p)


def inflate_patch_embedding_3d(
    ckpt: Checkpoint, depth_p: int, depth: int = 28, normalize: bool = True
) -> Checkpoint:
    """Repeat the 2D kernel ``depth_p`` times along a new leading depth axis.

    With ``normalize`` the repeated kernel is divided by ``depth_p`` so a
    depth-replicated volume reproduces the 2D patch projections.
    """
    if depth_p <= 0 or depth % depth_p:
        raise PatchSizeError(
            f"Depth patch size {depth_p} does not divide depth D={depth}"
        )
    kernel = ckpt["patch_embed.weight"]
    if kernel.ndim == 5:
        if kernel.shape[0] != depth_p:
            raise ShapeError(
                f"Kernel is already 3D with depth {kernel.shape[0]}, not {depth_p}"
            )
        return ckpt
    if kernel.ndim != 4:
        raise ShapeError(f"Cannot inflate kernel of shape {kernel.shape}")

    inflated = np.repeat(kernel[None], depth_p, axis=0)
    if normalize:
        inflated = inflated / depth_p
    extents = list(ckpt.metadata.get("extents", []))[-2:]
    return ckpt.replace(
        {"patch_embed.weight": inflated.astype(kernel.dtype)},
        dims=3,
        extents=[depth] + extents,
    )


def _source_grid(ckpt: Checkpoint, n_tokens: int) -> Tuple[int, ...]:
    grid = tuple(ckpt.metadata.get("grid", ()))
    if len(grid) == 3 and math.prod(grid) == n_tokens:
        return grid
    side = math.isqrt(n_tokens)
    if side * side != n_tokens:
        raise ShapeError(
            f"Positional embeddings hold {n_tokens} patch tokens, which is not "
            f"a square grid"
        )
    return (side, side)


def interpolate_positional_embeddings(
    ckpt: Checkpoint, target_grid: Sequence[int], mode: Optional[str] = None
) -> Checkpoint:
    """Resample grid-shaped positional embeddings to ``target_grid``.

    Bilinear for 2D targets and trilinear for 3D targets, both with
    align-corners semantics. A 2D source going to a 3D target is stacked as
    a single-slice volume and resampled in one trilinear pass. The
    class-token embedding is carried over verbatim.
    """
    target_grid = tuple(int(g) for g in target_grid)
    expected_mode = BILINEAR if len(target_grid) == 2 else TRILINEAR
    if len(target_grid) not in (2, 3):
        raise ShapeError(f"Target grid must be 2D or 3D, got {target_grid}")
    if mode is not None and mode != expected_mode:
        raise ConfigError(
            f"Interpolation mode '{mode}' does not fit a {len(target_grid)}D grid"
        )

    pos = ckpt["pos_embed"]
    d = pos.shape[-1]
    cls_pos, patch_pos = pos[:, :1], pos[0, 1:]
    source_grid = _source_grid(ckpt, patch_pos.shape[0])
    if source_grid == target_grid:
        return ckpt.replace(grid=list(target_grid), **_extents(ckpt, target_grid))

    field = patch_pos.reshape(source_grid + (d,))
    if len(target_grid) == 3 and len(source_grid) == 2:
        field = field[None]
    elif len(target_grid) == 2 and len(source_grid) == 3:
        raise ShapeError("Cannot interpolate 3D positional embeddings onto a 2D grid")
    resized = _resize(field, target_grid).reshape(1, -1, d).astype(pos.dtype)

    logger.info("Interpolated positional embeddings %s -> %s", source_grid, target_grid)
    return ckpt.replace(
        {"pos_embed": np.concatenate([cls_pos, resized], axis=1)},
        grid=list(target_grid),
        **_extents(ckpt, target_grid),
    )


def _extents(ckpt: Checkpoint, grid: Tuple[int, ...]) -> dict:
    p = ckpt.metadata.get("patch_size")
    if p is None:
        return {}
    return {"extents": [g * p for g in grid]}


def replace_classification_head(
    ckpt: Checkpoint, K: int, seed: int = 0, reuse: bool = False
) -> Checkpoint:
    """New ``d x K`` head (truncated normal, std 0.02) with a zero bias.

    With ``reuse`` a head that already has ``K`` outputs is kept.
    """
    if K < 2:
        raise ConfigError(f"Classification head needs K >= 2 classes, got {K}")
    weight = ckpt["head.weight"]
    if reuse and weight.shape[1] == K:
        return ckpt
    d = weight.shape[0]
    rng = np.random.default_rng(seed)
    return ckpt.replace(
        {
            "head.weight": trunc_normal((d, K), rng, dtype=weight.dtype),
            "head.bias": np.zeros((K,), dtype=weight.dtype),
        },
        num_classes=K,
    )


@dataclass(frozen=True)
class AdaptationPlan:
    target: PatchSpec
    num_classes: int
    interpolation: Optional[str] = None
    normalize_inflation: bool = True
    reuse_head: bool = False
    patch_strategy: str = "resample"

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        expected = BILINEAR if self.target.dims == 2 else TRILINEAR
        if self.interpolation not in (None, expected):
            raise ConfigError(
                f"Interpolation '{self.interpolation}' does not fit a "
                f"{self.target.dims}D target"
            )


def adapt(ckpt: Checkpoint, plan: AdaptationPlan, seed: int = 0, adapter=None) -> Checkpoint:
    """Apply a full adaptation plan. Applying the same plan twice is the
    same as applying it once."""
    from . import adapters

    if adapter is None:
        adapter = adapters.by_name(plan.patch_strategy)
    target = plan.target
    kernel = ckpt["patch_embed.weight"]
    out = ckpt
    if kernel.shape[0] != target.p:
        if kernel.ndim != 4:
            raise CheckpointError(
                f"Cannot change the patch size of a 3D kernel {kernel.shape}"
            )
        out = adapter.adapt(ckpt, target.p, seed=seed)
    if target.dims == 3:
        out = inflate_patch_embedding_3d(
            out, target.p, depth=target.D, normalize=plan.normalize_inflation
        )
    out = interpolate_positional_embeddings(out, target.grid, plan.interpolation)
    out = replace_classification_head(
        out, plan.num_classes, seed=seed, reuse=plan.reuse_head
    )
    out = out.replace(
        dims=target.dims,
        extents=list(target.extents),
        grid=list(target.grid),
        patch_size=target.p,
        in_chans=target.C,
    )
    out.validate()
    return out
