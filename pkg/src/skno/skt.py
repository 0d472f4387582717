"""Reader/writer for the SKT1 binary tensor format.

Layout (all integers little-endian)::

    b"SKNOTENS"        8-byte magic
    u32 version        = 1
    u8  dtype          0 = float64, 1 = complex128 (interleaved re/im)
    u8  ndim
    ndim x u64         axis lengths
    payload            row-major, little-endian
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import UsageError

MAGIC = b"SKNOTENS"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<c16")}


def write_skt(path, array) -> Path:
    arr = np.asarray(array)
    if np.iscomplexobj(arr):
        code, arr = 1, arr.astype("<c16")
    else:
        code, arr = 0, arr.astype("<f8")
    if arr.ndim > 255:
        raise UsageError("SKT1 supports at most 255 axes")
    header = MAGIC + struct.pack("<IBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes(order="C"))
    os.replace(tmp, path)
    return path


def read_skt(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise UsageError(f"{path}: bad magic, not an SKT1 file")
    version, code, ndim = struct.unpack_from("<IBB", data, 8)
    if version != VERSION:
        raise UsageError(f"{path}: unsupported SKT version {version}")
    if code not in _DTYPES:
        raise UsageError(f"{path}: unknown dtype code {code}")
    off = 8 + 6
    shape = struct.unpack_from(f"<{ndim}Q", data, off)
    off += 8 * ndim
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    if len(data) - off != count * dtype.itemsize:
        raise UsageError(f"{path}: payload size mismatch")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
    return arr.reshape(shape).astype(dtype.newbyteorder("="))
