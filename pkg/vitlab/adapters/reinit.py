from __future__ import annotations

import argparse

from vitlab.adaptation import reinit_patch_embedding
from vitlab.checkpoint import Checkpoint
from vitlab.model import INIT_STD

from .base import Base


class Reinit(Base):
    """Discard the pretrained kernel and draw a fresh one at the target size."""

    name = "reinit"

    def __init__(self, std: float = INIT_STD):
        self.std = std

    @classmethod
    def contribute_to_cli(cls, parser: argparse.ArgumentParser) -> None:
        parser.add_argument(
            "--init-std",
            dest="init_std",
            type=float,
            default=INIT_STD,
            help=f"Standard deviation of the fresh kernel (default: {INIT_STD})",
        )

    @classmethod
    def from_cli_args(cls, args: argparse.Namespace) -> "Reinit":
        return cls(std=getattr(args, "init_std", INIT_STD))

    def adapt(self, ckpt: Checkpoint, target_p: int, seed: int = 0) -> Checkpoint:
        return reinit_patch_embedding(ckpt, target_p, seed=seed, std=self.std)
