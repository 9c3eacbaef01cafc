"""MVST binary tensor files.

Layout: b"MVST", version byte 0x01, dtype byte (0=f64, 1=f32, 2=u8), ndim byte,
ndim little-endian u32 extents, then the row-major little-endian payload.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"MVST"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODES = {np.float64: 0, np.float32: 1, np.uint8: 2}


class MVSTError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    code = _CODES.get(arr.dtype.type)
    if code is None:
        raise MVSTError(f"unsupported dtype {arr.dtype}; use float64, float32 or uint8")
    if arr.ndim > 255:
        raise MVSTError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise MVSTError("not an MVST file (bad magic)")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise MVSTError(f"unsupported MVST version {version}")
    if code not in _DTYPES:
        raise MVSTError(f"unknown dtype code {code}")
    off = 7
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != count * dtype.itemsize:
        raise MVSTError(f"payload size mismatch for shape {shape}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape).astype(dtype.newbyteorder("="))


def save(path: str | os.PathLike, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
