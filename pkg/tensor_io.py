"""
On-disk tensor containers and archives of named containers.

A container is an 8-byte ASCII decimal header length, a JSON header
({dtype, shape, order, meta}), a newline, then the raw little-endian payload.
"""
import io
import json
import logging
import zipfile
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from grid_field import FieldKind, Grid, ScalarImage, VectorField

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
HEADER_DIGITS = 8
RECORD_MEMBER = "record.json"
MEMBER_SUFFIX = ".tc"


class ContainerError(ValueError):
    """Malformed or unsupported tensor container."""


def _dtype_code(array: np.ndarray) -> str:
    if array.dtype == np.float32:
        return "f32"
    if array.dtype == np.float64:
        return "f64"
    raise ContainerError(f"only float32 and float64 tensors are supported, got {array.dtype}")


def encode_container(array: np.ndarray, meta: Optional[Dict] = None) -> bytes:
    array = np.asarray(array)
    code = _dtype_code(array)
    header = json.dumps({
        "dtype": code,
        "shape": list(array.shape),
        "order": "C",
        "meta": meta or {},
    }, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes(order="C")
    return f"{len(header):0{HEADER_DIGITS}d}".encode("ascii") + header + b"\n" + payload


def decode_container(blob: bytes) -> Tuple[np.ndarray, Dict]:
    try:
        length = int(blob[:HEADER_DIGITS].decode("ascii"))
        header = json.loads(blob[HEADER_DIGITS:HEADER_DIGITS + length].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise ContainerError(f"unreadable container header: {e}") from e
    start = HEADER_DIGITS + length
    if blob[start:start + 1] != b"\n":
        raise ContainerError("container header is not terminated by a newline")
    if header.get("dtype") not in DTYPES or header.get("order") != "C":
        raise ContainerError(f"unsupported container layout: {header}")
    dtype = DTYPES[header["dtype"]]
    shape = tuple(int(n) for n in header["shape"])
    payload = blob[start + 1:]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise ContainerError(f"payload has {len(payload)} bytes, header implies {expected}")
    array = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return array, header


def write_container(path: PathLike, array: np.ndarray, meta: Optional[Dict] = None) -> Path:
    path = Path(path)
    path.write_bytes(encode_container(array, meta))
    return path


def read_container(path: PathLike) -> Tuple[np.ndarray, Dict]:
    return decode_container(Path(path).read_bytes())


def save_image(path: PathLike, img: ScalarImage, meta: Optional[Dict] = None) -> Path:
    record = dict(meta or {})
    record["spacing"] = list(img.grid.spacing)
    return write_container(path, img.values, record)


def _grid_from(shape, header: Dict) -> Grid:
    spacing = header.get("meta", {}).get("spacing")
    return Grid(tuple(shape), tuple(spacing) if spacing else None)


def load_image(path: PathLike) -> ScalarImage:
    values, header = read_container(path)
    return ScalarImage(_grid_from(values.shape, header), values.astype(np.float64))


def save_field(path: PathLike, fld: VectorField, meta: Optional[Dict] = None) -> Path:
    record = dict(meta or {})
    record["spacing"] = list(fld.grid.spacing)
    record["kind"] = fld.kind.value
    return write_container(path, fld.vectors, record)


def load_field(path: PathLike) -> VectorField:
    vectors, header = read_container(path)
    kind = FieldKind(header.get("meta", {}).get("kind", FieldKind.DISPLACEMENT.value))
    return VectorField(_grid_from(vectors.shape[:-1], header), vectors.astype(np.float64), kind=kind)


def write_archive(path: PathLike, tensors: Dict[str, np.ndarray], record: Optional[Dict] = None) -> Path:
    """Zip archive with one container per named tensor plus a JSON record."""
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for name in sorted(tensors):
            # fixed timestamp: identical tensors give identical bytes
            info = zipfile.ZipInfo(name + MEMBER_SUFFIX, date_time=(1980, 1, 1, 0, 0, 0))
            archive.writestr(info, encode_container(tensors[name]))
        info = zipfile.ZipInfo(RECORD_MEMBER, date_time=(1980, 1, 1, 0, 0, 0))
        archive.writestr(info, json.dumps(record or {}, sort_keys=True, indent=2))
    logger.debug(f"wrote archive {path} with {len(tensors)} tensors")
    return path


def read_archive(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict]:
    tensors = {}
    record = {}
    try:
        with zipfile.ZipFile(Path(path)) as archive:
            for name in archive.namelist():
                data = archive.read(name)
                if name == RECORD_MEMBER:
                    record = json.load(io.BytesIO(data))
                elif name.endswith(MEMBER_SUFFIX):
                    tensors[name[:-len(MEMBER_SUFFIX)]], _ = decode_container(data)
    except zipfile.BadZipFile as e:
        raise ContainerError(f"{path} is not a tensor archive: {e}") from e
    return tensors, record
