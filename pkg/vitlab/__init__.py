"""vitlab: Vision Transformer patch-size experiments on small medical images."""

from .common import PatchSpec, ViTConfig
from .model import VisionTransformer


__title__ = "vitlab"
__description__ = "Patch-size sweeps for Vision Transformers on MedMNIST-scale data."
__url__ = "https://github.com/Xavier-Lam/vitlab"
__version__ = "0.1.0"
__author__ = "Xavier-Lam"
__author_email__ = "xavierlam7@hotmail.com"


__all__ = [
    "__version__",
    "PatchSpec",
    "ViTConfig",
    "VisionTransformer",
]
