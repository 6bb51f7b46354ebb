"""Lossless binary records for float64 arrays.

Raw tensor file::

    b"STSSAD01" | uint32 rank | uint64 extents[rank] | float64 data (row-major)

Checkpoint file::

    b"STSSAD01" | uint32 format version | uint32 count | count x (rank, extents, data)

All integers and reals are little-endian.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"STSSAD01"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


def _write_array(buf, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes(order="C"))


def _read_exact(buf, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what} (wanted {n} bytes, got {len(data)})")
    return data


def _read_array(buf, what: str) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(buf, 4, f"{what} rank"))
    if rank > 16:
        raise FormatError(f"implausible rank {rank} in {what}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(buf, 8 * rank, f"{what} extents"))
    count = int(np.prod(shape)) if rank else 1
    raw = _read_exact(buf, 8 * count, f"{what} data")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def _check_magic(buf, path) -> None:
    magic = buf.read(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")


def save_raw(path, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    _write_array(buf, np.asarray(arr))
    Path(path).write_bytes(buf.getvalue())


def load_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        _check_magic(fh, path)
        arr = _read_array(fh, f"{path}")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor record")
    return arr


def save_arrays(path, arrays) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
    for arr in arrays:
        _write_array(buf, np.asarray(arr))
    Path(path).write_bytes(buf.getvalue())


def load_arrays(path) -> list[np.ndarray]:
    with open(path, "rb") as fh:
        _check_magic(fh, path)
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        arrays = [_read_array(fh, f"record {i}") for i in range(count)]
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {count} records")
    return arrays
