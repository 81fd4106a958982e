"""MedMNIST-layout archives: a ZIP container of NPY v1.0 arrays named
``{train,val,test}_{images,labels}``."""

from __future__ import annotations

import io
import logging
from pathlib import Path
import struct
from typing import Optional
import zipfile
import zlib

import numpy as np
from numpy.lib import format as npy_format

from vitlab.common import DatasetFormatError

from .bundle import SPLITS, DatasetBundle, Split
from .registry import lookup, normalize_name

logger = logging.getLogger(__name__)

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)
_LOCAL_HEADER = struct.Struct("<4s5H3L2H")
_LOCAL_MAGIC = b"PK\x03\x04"
_CENTRAL_MAGIC = b"PK\x01\x02"


def _locate_damage(data: bytes) -> str:
    """Walk the local member records of a ZIP that failed to open and
    describe the first point where the bytes stop making sense."""
    offset = 0
    while offset + _LOCAL_HEADER.size <= len(data):
        record = _LOCAL_HEADER.unpack_from(data, offset)
        if record[0] == _CENTRAL_MAGIC:
            return f"central directory at offset {offset} is incomplete"
        if record[0] != _LOCAL_MAGIC:
            return f"no ZIP record at offset {offset}"
        compressed, name_len, extra_len = record[7], record[9], record[10]
        start = offset + _LOCAL_HEADER.size
        name = data[start : start + name_len].decode("utf-8", "replace")
        data_start = start + name_len + extra_len
        end = data_start + compressed
        if end > len(data):
            return (
                f"member '{name}' at offset {offset} needs {compressed} bytes "
                f"from offset {data_start}"
            )
        offset = end
    if data[offset : offset + 4] == _CENTRAL_MAGIC:
        return f"central directory at offset {offset} is incomplete"
    return f"record header at offset {offset} is cut short"


def _parse_npy(raw: bytes, where: str) -> np.ndarray:
    buf = io.BytesIO(raw)
    try:
        version = npy_format.read_magic(buf)
        if version == (1, 0):
            shape, fortran, dtype = npy_format.read_array_header_1_0(buf)
        elif version == (2, 0):
            shape, fortran, dtype = npy_format.read_array_header_2_0(buf)
        else:
            raise ValueError(f"unsupported NPY version {version}")
    except ValueError as exc:
        raise DatasetFormatError(
            f"{where}: bad NPY header at offset {buf.tell()}: {exc}"
        ) from exc
    if dtype.hasobject:
        raise DatasetFormatError(f"{where}: object arrays are not supported")

    offset = buf.tell()
    count = int(np.prod(shape))
    nbytes = count * dtype.itemsize
    if len(raw) - offset < nbytes:
        raise DatasetFormatError(
            f"{where}: truncated data at offset {len(raw)}, expected {nbytes} "
            f"bytes from offset {offset}"
        )
    array = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return array.reshape(shape, order="F" if fortran else "C")


def _read_member(zf: zipfile.ZipFile, key: str, path: Path) -> np.ndarray:
    member = f"{key}.npy"
    try:
        info = zf.getinfo(member)
    except KeyError:
        raise DatasetFormatError(f"{path}: archive has no member '{member}'") from None
    try:
        raw = zf.read(info)
    except (zipfile.BadZipFile, EOFError, zlib.error) as exc:
        raise DatasetFormatError(
            f"{path}:{member}: cannot read member at offset {info.header_offset}: {exc}"
        ) from exc
    return _parse_npy(raw, f"{path}:{member}")


def _to_unit_range(images: np.ndarray, where: str) -> np.ndarray:
    if images.dtype == np.uint8:
        return images.astype(np.float32) / 255.0
    if np.issubdtype(images.dtype, np.floating):
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DatasetFormatError(f"{where}: float images outside [0, 1]")
        return images.astype(np.float32)
    raise DatasetFormatError(f"{where}: unsupported image dtype {images.dtype}")


def _channel_last(images: np.ndarray, dims: int, where: str) -> np.ndarray:
    if images.ndim == dims + 1:
        return images[..., None]
    if images.ndim == dims + 2 and images.shape[-1] in (1, 3):
        return images
    raise DatasetFormatError(
        f"{where}: images of shape {images.shape} are not {dims}D"
    )


def _infer_dims(images: np.ndarray) -> int:
    if images.ndim == 3:
        return 2
    if images.ndim == 4:
        return 2 if images.shape[-1] in (1, 3) else 3
    return 3


def load_dataset(path: str | Path, name: Optional[str] = None) -> DatasetBundle:
    """Load an archive; split sizes are cross-checked against the registry
    with a warning on mismatch so subsets still load."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Dataset archive not found: {path}")
    name = name or path.stem
    info = lookup(name)

    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        data = path.read_bytes()
        raise DatasetFormatError(
            f"{path}: not a readable ZIP archive: {_locate_damage(data)} "
            f"but the file ends at offset {len(data)}"
        ) from exc

    raw = {}
    with zf:
        for split in SPLITS:
            for part in ("images", "labels"):
                raw[f"{split}_{part}"] = _read_member(zf, f"{split}_{part}", path)

    dims = info.dims if info else _infer_dims(raw["train_images"])
    splits = {}
    for split in SPLITS:
        where = f"{path}:{split}"
        images = _channel_last(
            _to_unit_range(raw[f"{split}_images"], where), dims, where
        )
        labels = raw[f"{split}_labels"]
        if labels.ndim == 2 and labels.shape[1] == 1:
            labels = labels[:, 0]
        if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
            raise DatasetFormatError(
                f"{where}: labels must be single integer class ids, got "
                f"{labels.dtype} {labels.shape}"
            )
        splits[split] = Split(images, labels.astype(np.int64))

    if info is not None:
        num_classes = info.num_classes
    else:
        num_classes = int(max(s.labels.max(initial=0) for s in splits.values())) + 1
    bundle = DatasetBundle(
        name=normalize_name(name),
        dims=dims,
        splits=splits,
        num_classes=max(num_classes, 2),
        modality=info.modality if info else "",
    )
    bundle.validate()

    if info is not None and bundle.sizes != info.split_sizes:
        logger.warning(
            "Split sizes of %s (%s) differ from the reference %s",
            path,
            bundle.sizes,
            info.split_sizes,
        )
    return bundle


def save_dataset(bundle: DatasetBundle, path: str | Path) -> Path:
    """Write ``bundle`` as uint8 images and ``N x 1`` int64 labels.

    Member timestamps are fixed, so equal bundles produce equal bytes.
    """
    bundle.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for split in SPLITS:
            images = bundle[split].images
            if images.shape[-1] == 1:
                images = images[..., 0]
            arrays = {
                "images": np.round(np.clip(images, 0.0, 1.0) * 255).astype(np.uint8),
                "labels": bundle[split].labels.astype("<i8").reshape(-1, 1),
            }
            for part, array in arrays.items():
                buf = io.BytesIO()
                npy_format.write_array(buf, np.ascontiguousarray(array), version=(1, 0))
                zf.writestr(zipfile.ZipInfo(f"{split}_{part}.npy", _FIXED_DATE), buf.getvalue())
    return path
