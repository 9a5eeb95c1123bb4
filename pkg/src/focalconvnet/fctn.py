"""Portable tensor files.

Single tensor record::

    b"FCTN" | u8 version | u8 dtype tag | u32 rank | u32 dims[rank] | payload (little-endian, row-major)

Named container (checkpoints): the same 4-byte magic and version, dtype tag
``CONTAINER_TAG``, then ``u32 count`` and ``count`` entries of
``u32 name_len | utf-8 name | tensor record``.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"FCTN"
VERSION = 1
CONTAINER_TAG = 255

DTYPE_TAGS = {
    0: np.dtype("<f8"),
    1: np.dtype("<f4"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
}
_TAG_OF = {v.str.lstrip("<|"): k for k, v in DTYPE_TAGS.items()}


def _tag_for(arr: np.ndarray) -> int:
    key = arr.dtype.newbyteorder("<").str.lstrip("<|")
    if key not in _TAG_OF:
        raise FormatError(f"dtype {arr.dtype} has no FCTN tag")
    return _TAG_OF[key]


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated FCTN data while reading {what}")
    return buf


def _read_header(fh: BinaryIO) -> tuple[int, int]:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, tag = struct.unpack("<BB", _read_exact(fh, 2, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported FCTN version {version}")
    return version, tag


def write_array(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    tag = _tag_for(arr)
    fh.write(MAGIC)
    fh.write(struct.pack("<BBI", VERSION, tag, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())


def _read_body(fh: BinaryIO, tag: int) -> np.ndarray:
    if tag not in DTYPE_TAGS:
        raise FormatError(f"unknown dtype tag {tag}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
    dt = DTYPE_TAGS[tag]
    count = int(np.prod(dims, dtype=np.int64))
    raw = _read_exact(fh, count * dt.itemsize, "payload")
    return np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def read_array(fh: BinaryIO) -> np.ndarray:
    _, tag = _read_header(fh)
    if tag == CONTAINER_TAG:
        raise FormatError("expected a single tensor record, found a container")
    return _read_body(fh, tag)


def dumps(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_array(buf, arr)
    return buf.getvalue()


def loads(data: bytes) -> np.ndarray:
    return read_array(io.BytesIO(data))


def save(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_array(fh, arr)


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_array(fh)


def save_container(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BBI", VERSION, CONTAINER_TAG, len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_array(fh, arr)


def load_container(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        _, tag = _read_header(fh)
        if tag != CONTAINER_TAG:
            raise FormatError(f"{path}: expected a named container, found a single tensor record")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "entry count"))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, n, "name").decode("utf-8")
            out[name] = read_array(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after last entry")
        return out
