from .archive import load_dataset, save_dataset
from .bundle import SPLITS, Batch, DatasetBundle, Split, batches
from .registry import REGISTRY, DatasetInfo, lookup
from .synthetic import generate_synthetic_texture
from .transforms import AugmentationPolicy, augment, augment_batch, to_three_channels


__all__ = [
    "AugmentationPolicy",
    "Batch",
    "DatasetBundle",
    "DatasetInfo",
    "REGISTRY",
    "SPLITS",
    "Split",
    "augment",
    "augment_batch",
    "batches",
    "generate_synthetic_texture",
    "load_dataset",
    "lookup",
    "save_dataset",
    "to_three_channels",
]
