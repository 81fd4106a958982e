"""Named-tensor checkpoints and their on-disk format.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header mapping
canonical tensor names to ``{dtype, shape, offset, nbytes}`` (plus a
``__metadata__`` entry describing the source configuration), then the raw
little-endian float32 data. Offsets are relative to the start of the data.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
import struct
from typing import Dict, List, Mapping, Tuple

import numpy as np

from .common import CheckpointError, CheckpointFormatError, PatchSpec, ViTConfig

logger = logging.getLogger(__name__)

METADATA_KEY = "__metadata__"
_HEADER_PREFIX = struct.Struct("<Q")
_DTYPE = np.dtype("<f4")


def canonical_shapes(config: ViTConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Canonical tensor names and shapes for a configuration, in order."""
    d, K = config.d, config.num_classes
    spec = config.patch
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["cls_token"] = (1, 1, d)
    shapes["pos_embed"] = (1, spec.num_tokens, d)
    shapes["patch_embed.weight"] = spec.kernel_shape + (d,)
    shapes["patch_embed.bias"] = (d,)
    for i in range(config.L):
        prefix = f"blocks.{i}"
        shapes[f"{prefix}.norm1.gamma"] = (d,)
        shapes[f"{prefix}.norm1.beta"] = (d,)
        shapes[f"{prefix}.attn.qkv.weight"] = (d, 3 * d)
        shapes[f"{prefix}.attn.qkv.bias"] = (3 * d,)
        shapes[f"{prefix}.attn.proj.weight"] = (d, d)
        shapes[f"{prefix}.attn.proj.bias"] = (d,)
        shapes[f"{prefix}.norm2.gamma"] = (d,)
        shapes[f"{prefix}.norm2.beta"] = (d,)
        shapes[f"{prefix}.mlp.fc1.weight"] = (d, config.hidden)
        shapes[f"{prefix}.mlp.fc1.bias"] = (config.hidden,)
        shapes[f"{prefix}.mlp.fc2.weight"] = (config.hidden, d)
        shapes[f"{prefix}.mlp.fc2.bias"] = (d,)
    shapes["norm.gamma"] = (d,)
    shapes["norm.beta"] = (d,)
    shapes["head.weight"] = (d, K)
    shapes["head.bias"] = (K,)
    return shapes


def count_parameters(config: ViTConfig) -> int:
    return int(sum(np.prod(shape) for shape in canonical_shapes(config).values()))


def config_metadata(config: ViTConfig) -> dict:
    spec = config.patch
    return {
        "dims": spec.dims,
        "L": config.L,
        "d": config.d,
        "h": config.h,
        "mlp_ratio": config.mlp_ratio,
        "num_classes": config.num_classes,
        "patch_size": spec.p,
        "extents": list(spec.extents),
        "grid": list(spec.grid),
        "in_chans": spec.C,
    }


def config_from_metadata(meta: dict) -> ViTConfig:
    try:
        extents = list(meta["extents"])
        if meta["dims"] == 3:
            D, H, W = extents
        else:
            D, (H, W) = None, extents
        spec = PatchSpec(p=meta["patch_size"], H=H, W=W, D=D, C=meta["in_chans"])
        config = ViTConfig(
            L=meta["L"],
            d=meta["d"],
            h=meta["h"],
            num_classes=meta["num_classes"],
            patch=spec,
            mlp_ratio=meta.get("mlp_ratio", 4),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"Invalid checkpoint metadata: {exc!r}") from exc
    return config


@dataclass
class Checkpoint:
    """Ordered mapping of canonical names to float32 arrays plus metadata."""

    tensors: "OrderedDict[str, np.ndarray]"
    metadata: dict = field(default_factory=dict)

    @property
    def config(self) -> ViTConfig:
        return config_from_metadata(self.metadata)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> List[str]:
        return list(self.tensors)

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            tensors=OrderedDict((k, v.copy()) for k, v in self.tensors.items()),
            metadata=json.loads(json.dumps(self.metadata)),
        )

    def replace(
        self, tensors: Mapping[str, np.ndarray] | None = None, **metadata
    ) -> "Checkpoint":
        """Return a new checkpoint with some tensors and metadata swapped.

        Untouched tensors are shared, not copied; arrays are treated as
        immutable once inside a checkpoint.
        """
        updated = OrderedDict(self.tensors)
        updated.update(tensors or {})
        meta = dict(self.metadata)
        meta.update(metadata)
        return Checkpoint(tensors=updated, metadata=meta)

    def validate(self) -> None:
        expected = canonical_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise CheckpointError(f"missing tensor {name}")
            actual = tuple(self.tensors[name].shape)
            if actual != shape:
                raise CheckpointError(
                    f"tensor {name} has shape {actual}, expected {shape}"
                )
        extra = [name for name in self.tensors if name not in expected]
        if extra:
            raise CheckpointError(f"unexpected tensor(s): {', '.join(extra)}")


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    ckpt.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    header: Dict[str, dict] = {METADATA_KEY: ckpt.metadata}
    blobs: List[bytes] = []
    offset = 0
    for name, array in ckpt.tensors.items():
        blob = np.ascontiguousarray(array, dtype=_DTYPE).tobytes()
        header[name] = {
            "dtype": "f32",
            "shape": list(array.shape),
            "offset": offset,
            "nbytes": len(blob),
        }
        blobs.append(blob)
        offset += len(blob)

    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER_PREFIX.pack(len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()

    if len(raw) < _HEADER_PREFIX.size:
        raise CheckpointFormatError(f"{path}: file too short for a header")
    (header_len,) = _HEADER_PREFIX.unpack_from(raw)
    data_start = _HEADER_PREFIX.size + header_len
    if data_start > len(raw):
        raise CheckpointFormatError(
            f"{path}: header length {header_len} exceeds file size {len(raw)}"
        )
    try:
        header = json.loads(raw[_HEADER_PREFIX.size : data_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header: {exc}") from exc
    if not isinstance(header, dict) or METADATA_KEY not in header:
        raise CheckpointFormatError(f"{path}: header has no {METADATA_KEY} entry")

    metadata = header.pop(METADATA_KEY)
    config = config_from_metadata(metadata)
    data = memoryview(raw)[data_start:]

    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in canonical_shapes(config).items():
        entry = header.pop(name, None)
        if entry is None:
            raise CheckpointError(f"missing tensor {name}")
        tensors[name] = _read_tensor(name, entry, shape, data, path)
    if header:
        raise CheckpointError(f"unexpected tensor(s): {', '.join(header)}")

    logger.debug("Loaded %d tensors from %s", len(tensors), path)
    return Checkpoint(tensors=tensors, metadata=metadata)


def _read_tensor(
    name: str, entry: dict, expected: Tuple[int, ...], data: memoryview, path: Path
) -> np.ndarray:
    try:
        dtype, shape = entry["dtype"], tuple(entry["shape"])
        offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: bad entry for {name}: {entry}") from exc
    if dtype != "f32":
        raise CheckpointFormatError(f"{path}: tensor {name} has dtype {dtype}")
    if shape != expected:
        raise CheckpointError(
            f"tensor {name} has shape {shape}, expected {expected}"
        )
    if nbytes != int(np.prod(shape)) * _DTYPE.itemsize:
        raise CheckpointFormatError(
            f"{path}: tensor {name} declares {nbytes} bytes for shape {shape}"
        )
    if offset < 0 or offset + nbytes > len(data):
        raise CheckpointFormatError(
            f"{path}: tensor {name} at offset {offset} runs past end of data"
        )
    array = np.frombuffer(data[offset : offset + nbytes], dtype=_DTYPE)
    return array.reshape(shape).astype(np.float32)
