"""NVT1 binary tensor container.

Layout: magic ``b"NVT1"``, one dtype byte (0 = float32 LE, 1 = float64 LE), one
rank byte, ``rank`` little-endian uint64 extents, then the row-major payload.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"NVT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


class NVT1Error(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt not in _CODES:
        if arr.dtype.kind not in "fiu":
            raise NVT1Error(f"unsupported dtype {arr.dtype}")
        dt = np.dtype("<f8")
    if arr.ndim > 255:
        raise NVT1Error("rank exceeds 255")
    header = MAGIC + struct.pack("<BB", _CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise NVT1Error("missing NVT1 magic")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _DTYPES:
        raise NVT1Error(f"unknown dtype code {code}")
    off = 6 + 8 * rank
    if len(buf) < off:
        raise NVT1Error("truncated header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 6)
    dt = _DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != off + count * dt.itemsize:
        raise NVT1Error(f"payload size mismatch for shape {shape}")
    return np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape).copy()


def save(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(arr))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
