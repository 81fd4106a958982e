"""Channel replication and seeded training-time augmentation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
import math
from typing import Tuple

import numpy as np
from scipy import ndimage

from vitlab.common import ConfigError, ShapeError

# Plane pairs of a D x H x W x C volume, one per rotation axis.
_PLANES_3D = ((1, 2), (0, 2), (0, 1))


def to_three_channels(x: np.ndarray) -> np.ndarray:
    """Replicate a single channel three times; 3-channel input is returned
    as is. The channel axis is last."""
    channels = x.shape[-1]
    if channels == 3:
        return x
    if channels == 1:
        return np.repeat(x, 3, axis=-1)
    raise ShapeError(f"Expected 1 or 3 channels, got {channels} in {x.shape}")


@dataclass(frozen=True)
class AugmentationPolicy:
    enabled: bool = True
    # 2D
    crop: bool = True
    crop_scale: Tuple[float, float] = (0.8, 1.0)
    hflip: bool = True
    hflip_p: float = 0.5
    rotate: bool = True
    rotation_degrees: float = 15.0
    jitter: bool = True
    brightness: float = 0.1
    contrast: float = 0.1
    # 3D
    flip3d: bool = True
    flip3d_p: float = 0.5
    rot90: bool = True
    rot90_p: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "crop_scale", tuple(self.crop_scale))
        self.validate()

    def validate(self) -> None:
        for name in ("hflip_p", "flip3d_p", "rot90_p"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        low, high = self.crop_scale
        if not 0.0 < low <= high <= 1.0:
            raise ConfigError(f"crop_scale must lie in (0, 1], got {self.crop_scale}")
        for name in ("rotation_degrees", "brightness", "contrast"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    @classmethod
    def disabled(cls) -> "AugmentationPolicy":
        return cls(enabled=False)

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentationPolicy":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown augmentation key(s): {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["crop_scale"] = list(self.crop_scale)
        return data


def _random_resized_crop(x, scale, rng):
    H, W = x.shape[:2]
    area = rng.uniform(*scale)
    side_h = max(1, min(H, int(round(math.sqrt(area) * H))))
    side_w = max(1, min(W, int(round(math.sqrt(area) * W))))
    top = int(rng.integers(0, H - side_h + 1))
    left = int(rng.integers(0, W - side_w + 1))
    if side_h == H and side_w == W:
        return x
    patch = x[top : top + side_h, left : left + side_w]
    return ndimage.zoom(patch, (H / side_h, W / side_w, 1), order=1, mode="nearest")


def _augment_2d(x, policy, rng):
    if policy.crop:
        x = _random_resized_crop(x, policy.crop_scale, rng)
    if policy.hflip and rng.random() < policy.hflip_p:
        x = x[:, ::-1]
    if policy.rotate and policy.rotation_degrees > 0:
        angle = rng.uniform(-policy.rotation_degrees, policy.rotation_degrees)
        x = ndimage.rotate(x, angle, axes=(1, 0), reshape=False, order=1, mode="nearest")
    if policy.jitter:
        b = rng.uniform(-policy.brightness, policy.brightness)
        c = rng.uniform(1 - policy.contrast, 1 + policy.contrast)
        mean = x.mean()
        x = (x - mean) * c + mean + b
    return x


def _augment_3d(x, policy, rng):
    if policy.flip3d:
        for axis in range(3):
            if rng.random() < policy.flip3d_p:
                x = np.flip(x, axis=axis)
    if policy.rot90:
        for axes in _PLANES_3D:
            if rng.random() < policy.rot90_p:
                x = np.rot90(x, k=int(rng.integers(1, 4)), axes=axes)
    return x


def augment(
    sample: np.ndarray,
    policy: AugmentationPolicy,
    seed: int,
    epoch: int = 0,
    index: int = 0,
) -> np.ndarray:
    """Augment one channel-last sample.

    2D order is crop, flip, rotate, jitter; 3D order is flips then
    right-angle rotations. The result depends only on ``(seed, epoch,
    index)`` and is clamped to ``[0, 1]``.
    """
    if not policy.enabled:
        return sample
    dims = sample.ndim - 1
    rng = np.random.default_rng([seed, epoch, index])
    if dims == 2:
        out = _augment_2d(sample, policy, rng)
    elif dims == 3:
        if len(set(sample.shape[:3])) != 1 and policy.rot90:
            raise ShapeError(f"Right-angle rotations need a cubic volume, got {sample.shape}")
        out = _augment_3d(sample, policy, rng)
    else:
        raise ShapeError(f"Cannot augment a sample of shape {sample.shape}")
    if out.shape != sample.shape:
        raise ShapeError(f"Augmentation changed shape {sample.shape} -> {out.shape}")
    return np.clip(out, 0.0, 1.0).astype(sample.dtype, copy=False)


def augment_batch(
    images: np.ndarray,
    indices: np.ndarray,
    policy: AugmentationPolicy,
    seed: int,
    epoch: int,
) -> np.ndarray:
    if not policy.enabled:
        return images
    return np.stack(
        [augment(img, policy, seed, epoch, int(i)) for img, i in zip(images, indices)]
    )
