from __future__ import annotations

from dataclasses import dataclass, field
from math import prod
from typing import Callable, Optional, Tuple


class VitLabError(Exception):
    """Base class for all errors raised by vitlab."""


class ShapeError(VitLabError, ValueError):
    pass


class PatchSizeError(ShapeError):
    pass


class GraphError(VitLabError, RuntimeError):
    pass


class CheckpointError(VitLabError, ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class DatasetFormatError(VitLabError, ValueError):
    pass


class ConfigError(VitLabError, ValueError):
    pass


class MetricError(VitLabError, ValueError):
    pass


class TrainingDivergedError(VitLabError, RuntimeError):
    pass


class UnsupportedOperationError(VitLabError, RuntimeError):
    pass


class MissingDependencyException(RuntimeError):
    def __init__(self, extra: str, package: str) -> None:
        msg = (
            f"Package '{package}' is not installed. Install with "
            f"`pip install vitlab[{extra}]`."
        )
        super().__init__(msg)


ReporterCallback = Callable[..., None]


@dataclass(frozen=True)
class PatchSpec:
    """Patchification geometry of a 2D image or a 3D volume.

    ``D`` is None for 2D inputs. Arrays are laid out channel-last:
    ``H x W x C`` or ``D x H x W x C``.
    """

    p: int
    H: int = 28
    W: int = 28
    D: Optional[int] = None
    C: int = 3

    def __post_init__(self) -> None:
        if self.p < 1:
            raise PatchSizeError(f"Patch size must be positive, got p={self.p}")
        if any(extent % self.p for extent in self.extents):
            extents = ", ".join(
                f"{n}={v}" for n, v in zip(self.axis_names, self.extents)
            )
            raise PatchSizeError(
                f"Patch size p={self.p} does not divide the input extents "
                f"({extents})"
            )

    @property
    def dims(self) -> int:
        return 2 if self.D is None else 3

    @property
    def axis_names(self) -> Tuple[str, ...]:
        return ("H", "W") if self.D is None else ("D", "H", "W")

    @property
    def extents(self) -> Tuple[int, ...]:
        if self.D is None:
            return (self.H, self.W)
        return (self.D, self.H, self.W)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return self.extents + (self.C,)

    @property
    def grid(self) -> Tuple[int, ...]:
        return tuple(extent // self.p for extent in self.extents)

    @property
    def num_patches(self) -> int:
        return prod(self.grid)

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.p**self.dims * self.C

    @property
    def kernel_shape(self) -> Tuple[int, ...]:
        return (self.p,) * self.dims + (self.C,)

    def with_patch(self, p: int) -> "PatchSpec":
        return PatchSpec(p=p, H=self.H, W=self.W, D=self.D, C=self.C)


@dataclass(frozen=True)
class ViTConfig:
    """Vision Transformer hyperparameters."""

    L: int
    d: int
    h: int
    num_classes: int
    patch: PatchSpec = field(default_factory=lambda: PatchSpec(p=4))
    mlp_ratio: int = 4
    drop_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.L < 1 or self.d < 1 or self.h < 1:
            raise ConfigError(
                f"L, d and h must be positive (L={self.L}, d={self.d}, h={self.h})"
            )
        if self.d % self.h:
            raise ConfigError(
                f"Embedding dimension d={self.d} is not divisible by h={self.h}"
            )
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError(f"drop_rate must be in [0, 1), got {self.drop_rate}")

    @property
    def head_dim(self) -> int:
        return self.d // self.h

    @property
    def hidden(self) -> int:
        return self.d * self.mlp_ratio

    @classmethod
    def vit_small(cls, patch: PatchSpec, num_classes: int, **kwargs) -> "ViTConfig":
        return cls(L=12, d=384, h=6, num_classes=num_classes, patch=patch, **kwargs)

    @classmethod
    def vit_micro(cls, patch: PatchSpec, num_classes: int, **kwargs) -> "ViTConfig":
        return cls(L=4, d=64, h=4, num_classes=num_classes, patch=patch, **kwargs)

    @classmethod
    def preset(
        cls, name: str, patch: PatchSpec, num_classes: int, **kwargs
    ) -> "ViTConfig":
        presets = {"vit_small": cls.vit_small, "vit_micro": cls.vit_micro}
        if name not in presets:
            raise ConfigError(
                f"Unknown model preset '{name}' (choices: {', '.join(presets)})"
            )
        return presets[name](patch, num_classes, **kwargs)

    def with_patch(self, p: int) -> "ViTConfig":
        return ViTConfig(
            L=self.L,
            d=self.d,
            h=self.h,
            num_classes=self.num_classes,
            patch=self.patch.with_patch(p),
            mlp_ratio=self.mlp_ratio,
            drop_rate=self.drop_rate,
        )
