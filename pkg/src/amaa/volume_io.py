"""Portable binary container for volumes and label grids.

Byte layout (all integers little-endian):

====== ===== =======================================
offset size  field
====== ===== =======================================
0      5     magic ``b"VVOX1"``
5      1     format version, currently 1
6      1     dtype tag: 0 = float64, 1 = uint16
7      16    dims C, D, H, W as uint32
23     n     payload, C-order (channel, depth, row, col)
23+n   4     CRC32 of the payload bytes
====== ===== =======================================

Round trips are bit-exact. Images ride along as 3-channel float volumes
with D = 1; label grids use the uint16 tag with C = 1. Writes go through a
temp file and an atomic rename so a crash never leaves a half-written file.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .errors import DataFormatError

MAGIC = b"VVOX1"
VERSION = 1
_HEADER = struct.Struct("<5sBB4I")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<u2")}


def _dtype_tag(arr: np.ndarray) -> int:
    if np.issubdtype(arr.dtype, np.floating):
        return 0
    if np.issubdtype(arr.dtype, np.integer):
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
            raise DataFormatError(
                f"integer volume out of uint16 range: [{arr.min()}, {arr.max()}]"
            )
        return 1
    raise DataFormatError(f"unsupported dtype {arr.dtype}")


def save_volume(path, volume) -> None:
    """Write a (C, D, H, W) array; floats as f64, integers as u16."""
    arr = np.asarray(volume)
    if arr.ndim != 4:
        raise DataFormatError(f"volume must be 4-d (C, D, H, W), got {arr.shape}")
    tag = _dtype_tag(arr)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
    header = _HEADER.pack(MAGIC, VERSION, tag, *arr.shape)
    crc = zlib.crc32(payload)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))
    os.replace(tmp, path)


def load_volume(path) -> np.ndarray:
    """Read a volume written by save_volume; bit-exact inverse."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise DataFormatError(
            f"{path}: truncated header, need {_HEADER.size} bytes, have {len(blob)}"
        )
    magic, version, tag, c, d, h, w = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported version {version} at offset 5")
    if tag not in _DTYPES:
        raise DataFormatError(f"{path}: unknown dtype tag {tag} at offset 6")
    if min(c, d, h, w) == 0:
        raise DataFormatError(f"{path}: zero-sized dims {(c, d, h, w)}")
    dtype = _DTYPES[tag]
    n = c * d * h * w * dtype.itemsize
    end = _HEADER.size + n
    if len(blob) < end + 4:
        raise DataFormatError(
            f"{path}: truncated payload at offset {_HEADER.size}, "
            f"need {n + 4} bytes, have {len(blob) - _HEADER.size}"
        )
    if len(blob) > end + 4:
        raise DataFormatError(
            f"{path}: {len(blob) - end - 4} trailing bytes after offset {end + 4}"
        )
    payload = blob[_HEADER.size:end]
    (stored_crc,) = struct.unpack_from("<I", blob, end)
    actual_crc = zlib.crc32(payload)
    if stored_crc != actual_crc:
        raise DataFormatError(
            f"{path}: CRC mismatch at offset {end}: stored {stored_crc:#010x}, "
            f"payload gives {actual_crc:#010x}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(c, d, h, w)
    return arr.astype(arr.dtype.newbyteorder("="))
