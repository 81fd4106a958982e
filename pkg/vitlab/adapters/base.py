from __future__ import annotations

import argparse
from abc import ABC, abstractmethod

from vitlab.checkpoint import Checkpoint


class Base(ABC):
    """Base class for patch-embedding adaptation strategies."""

    name: str = "base"

    @classmethod
    def contribute_to_cli(cls, parser: argparse.ArgumentParser) -> None:
        """Hook for CLI option registration."""

    @classmethod
    def from_cli_args(cls, args: argparse.Namespace) -> "Base":
        """Instantiate the strategy from CLI args."""
        return cls()  # pragma: no cover - overridden when needed

    @abstractmethod
    def adapt(self, ckpt: Checkpoint, target_p: int, seed: int = 0) -> Checkpoint:
        """Return a checkpoint whose 2D patch-embedding kernel is
        ``target_p x target_p``."""
        raise NotImplementedError
