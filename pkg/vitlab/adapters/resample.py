from __future__ import annotations

import argparse

from vitlab.adaptation import resample_patch_embedding_2d
from vitlab.checkpoint import Checkpoint

from .base import Base


class Resample(Base):
    """Bilinear kernel resampling, rescaled to keep constant-patch responses."""

    name = "resample"

    def __init__(self, rescale: bool = True):
        self.rescale = rescale

    @classmethod
    def contribute_to_cli(cls, parser: argparse.ArgumentParser) -> None:
        parser.add_argument(
            "--no-rescale",
            dest="rescale",
            action="store_false",
            help="Do not multiply the resized kernel by (p_src / p_tgt)^2",
        )

    @classmethod
    def from_cli_args(cls, args: argparse.Namespace) -> "Resample":
        return cls(rescale=getattr(args, "rescale", True))

    def adapt(self, ckpt: Checkpoint, target_p: int, seed: int = 0) -> Checkpoint:
        return resample_patch_embedding_2d(ckpt, target_p, rescale=self.rescale)
