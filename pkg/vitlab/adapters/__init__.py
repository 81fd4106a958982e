from vitlab.common import ConfigError

from .base import Base
from .reinit import Reinit
from .resample import Resample


def by_name(name: str) -> Base:
    """Default-configured strategy registered under ``name``."""
    for cls in (Resample, Reinit):
        if cls.name == name:
            return cls()
    raise ConfigError(f"Unknown patch-embedding strategy '{name}'")


__all__ = [
    "Base",
    "Reinit",
    "Resample",
    "by_name",
]
