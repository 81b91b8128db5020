"""Binary tensor format.

Layout (all integers little-endian u32)::

    b"MSKD" | version | rank | extent_0 ... extent_{rank-1} | float32 payload (row-major)
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from ..errors import FormatError
from .tensor import Tensor

MAGIC = b"MSKD"
VERSION = 1


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    raw = fh.read(8)
    if len(raw) != 8:
        raise FormatError("truncated tensor header")
    version, rank = struct.unpack("<II", raw)
    if version != VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError("truncated tensor extents")
    shape = struct.unpack(f"<{rank}I", raw)
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError(f"payload holds {len(payload)} bytes, expected {4 * count}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(buf))


def save_tensor(path: str | Path, t: Tensor | np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
