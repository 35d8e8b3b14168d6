"""Binary tensor files.

Layout: ``b"RTLT"``, u8 version (1), u8 dtype (0=f32, 1=f64), u8 ndim,
little-endian u32 dims, then little-endian raw values in row-major order.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"RTLT"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFormatError(ValueError):
    pass


def to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    code = _CODES[arr.dtype]
    head = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def read_from(fh: BinaryIO) -> np.ndarray:
    head = fh.read(7)
    if len(head) != 7 or head[:4] != MAGIC:
        raise TensorFormatError("bad magic")
    version, code, ndim = struct.unpack("<BBB", head[4:])
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    dt = _DTYPES[code]
    count = int(np.prod(dims)) if ndim else 1
    raw = fh.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise TensorFormatError("truncated tensor payload")
    return np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(dims)


def from_bytes(buf: bytes) -> np.ndarray:
    import io
    return read_from(io.BytesIO(buf))


def save(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(arr))


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_from(fh)
