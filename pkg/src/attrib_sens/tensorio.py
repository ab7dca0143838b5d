"""Binary tensor container.

Layout (all little-endian)::

    magic   4 bytes  b"ATNS"
    version u16      currently 1
    dtype   u8       0 = float32, 1 = float64
    ndim    u8
    dims    ndim x u32
    payload product(dims) IEEE-754 values, row-major
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ATNS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TensorFormatError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    if arr.ndim > 255:
        raise TensorFormatError("too many dimensions")
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise TensorFormatError("bad magic: not an ATNS tensor file")
    version, code, ndim = struct.unpack_from("<HBB", blob, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported format version {version}")
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    offset = 8 + 4 * ndim
    if len(blob) < offset:
        raise TensorFormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}I", blob, 8)
    dtype = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise TensorFormatError(
            f"payload length {len(blob) - offset} does not match dims {tuple(dims)} ({expected} bytes)")
    return np.frombuffer(blob, dtype=dtype, offset=offset).reshape(dims).astype(dtype.newbyteorder("="))


def write_tensor(path, array):
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
