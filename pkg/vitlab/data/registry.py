"""Reference split sizes of the MedMNIST collections used in the study."""

from __future__ import annotations

from dataclasses import dataclass
import re
from typing import Dict, Optional, Tuple


@dataclass(frozen=True)
class DatasetInfo:
    name: str
    dims: int
    splits: Tuple[int, int, int]  # train / val / test
    num_classes: int
    modality: str

    @property
    def split_sizes(self) -> Dict[str, int]:
        return dict(zip(("train", "val", "test"), self.splits))


REGISTRY: Dict[str, DatasetInfo] = {
    info.name: info
    for info in (
        DatasetInfo("breast", 2, (546, 78, 156), 2, "Ultrasound"),
        DatasetInfo("retina", 2, (1080, 120, 400), 5, "Fundus imaging"),
        DatasetInfo("blood", 2, (11959, 1712, 3421), 8, "Microscopy"),
        DatasetInfo("derma", 2, (7007, 1003, 2005), 7, "Dermatoscopy"),
        DatasetInfo("oct", 2, (97477, 10832, 1000), 4, "Retinal OCT"),
        DatasetInfo("organs", 2, (13932, 2452, 8827), 11, "Abdominal CT"),
        DatasetInfo("pneumonia", 2, (4708, 524, 624), 2, "X-ray"),
        DatasetInfo("adrenal", 3, (1188, 98, 298), 2, "Abdominal CT"),
        DatasetInfo("fracture", 3, (1027, 103, 240), 3, "Chest CT"),
        DatasetInfo("nodule", 3, (1158, 165, 310), 2, "Chest CT"),
        DatasetInfo("synapse", 3, (1230, 177, 352), 2, "Electron Microscopy"),
        DatasetInfo("vessel", 3, (1335, 191, 382), 2, "Brain MRA"),
    )
}


def normalize_name(name: str) -> str:
    """``BreastMNIST``, ``breastmnist.npz`` and ``breast`` all map to
    ``breast``; ``AdrenalMNIST3D`` maps to ``adrenal``."""
    key = name.lower()
    key = re.sub(r"\.npz$", "", key)
    key = re.sub(r"_(28|64|128|224)$", "", key)
    return re.sub(r"mnist(3d)?$", "", key)


def lookup(name: str) -> Optional[DatasetInfo]:
    return REGISTRY.get(normalize_name(name))
