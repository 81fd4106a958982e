"""Non-overlapping patchification of images and volumes."""

from __future__ import annotations

import numpy as np

from .common import PatchSpec, ShapeError


def _check_input(array: np.ndarray, spec: PatchSpec) -> None:
    if array.shape[-(spec.dims + 1) :] != spec.input_shape:
        raise ShapeError(
            f"Input of shape {array.shape} does not match patch spec "
            f"{spec.input_shape} (p={spec.p})"
        )


def patchify_2d(image: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Split ``H x W x C`` (optionally batched) into raster-order patches.

    Returns ``(T_p, p*p*C)``, or ``(B, T_p, p*p*C)`` for a batch; each patch
    is flattened channel-last.
    """
    if spec.dims != 2:
        raise ShapeError("patchify_2d needs a 2D patch spec")
    _check_input(image, spec)
    p = spec.p
    gh, gw = spec.grid
    lead = image.shape[:-3]
    x = image.reshape(lead + (gh, p, gw, p, spec.C))
    n = len(lead)
    x = x.transpose(tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    return np.ascontiguousarray(x).reshape(lead + (gh * gw, spec.patch_dim))


def unpatchify_2d(patches: np.ndarray, spec: PatchSpec) -> np.ndarray:
    p = spec.p
    gh, gw = spec.grid
    lead = patches.shape[:-2]
    if patches.shape[-2:] != (gh * gw, spec.patch_dim):
        raise ShapeError(
            f"Patch matrix {patches.shape} does not match spec "
            f"({gh * gw}, {spec.patch_dim})"
        )
    x = patches.reshape(lead + (gh, gw, p, p, spec.C))
    n = len(lead)
    x = x.transpose(tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4))
    return np.ascontiguousarray(x).reshape(lead + (spec.H, spec.W, spec.C))


def patchify_3d(volume: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Split ``D x H x W x C`` into depth-major cubes of ``p**3 * C`` values."""
    if spec.dims != 3:
        raise ShapeError("patchify_3d needs a 3D patch spec")
    _check_input(volume, spec)
    p = spec.p
    gd, gh, gw = spec.grid
    lead = volume.shape[:-4]
    x = volume.reshape(lead + (gd, p, gh, p, gw, p, spec.C))
    n = len(lead)
    axes = (n, n + 2, n + 4, n + 1, n + 3, n + 5, n + 6)
    x = x.transpose(tuple(range(n)) + axes)
    return np.ascontiguousarray(x).reshape(lead + (gd * gh * gw, spec.patch_dim))


def unpatchify_3d(patches: np.ndarray, spec: PatchSpec) -> np.ndarray:
    p = spec.p
    gd, gh, gw = spec.grid
    lead = patches.shape[:-2]
    if patches.shape[-2:] != (gd * gh * gw, spec.patch_dim):
        raise ShapeError(
            f"Patch matrix {patches.shape} does not match spec "
            f"({gd * gh * gw}, {spec.patch_dim})"
        )
    x = patches.reshape(lead + (gd, gh, gw, p, p, p, spec.C))
    n = len(lead)
    axes = (n, n + 3, n + 1, n + 4, n + 2, n + 5, n + 6)
    x = x.transpose(tuple(range(n)) + axes)
    return np.ascontiguousarray(x).reshape(lead + spec.input_shape)


def patchify(array: np.ndarray, spec: PatchSpec) -> np.ndarray:
    if spec.dims == 2:
        return patchify_2d(array, spec)
    return patchify_3d(array, spec)


def unpatchify(patches: np.ndarray, spec: PatchSpec) -> np.ndarray:
    if spec.dims == 2:
        return unpatchify_2d(patches, spec)
    return unpatchify_3d(patches, spec)


def patch_grid_overlay(
    image: np.ndarray, p: int, value: float = 1.0
) -> np.ndarray:
    """Copy of a 2D image (or the middle slice of a volume) with grid lines.

    Lines are drawn on the first row/column of every patch after the first,
    so ``p`` equal to the image edge leaves the image untouched.
    """
    if image.ndim == 4:
        image = image[image.shape[0] // 2]
    if image.ndim != 3:
        raise ShapeError(f"Expected H x W x C image, got shape {image.shape}")
    H, W = image.shape[:2]
    if H % p or W % p:
        raise ShapeError(f"Patch size p={p} does not divide H={H}, W={W}")
    out = image.copy()
    out[p:H:p, :, :] = value
    out[:, p:W:p, :] = value
    return out
