"""Flat binary tensor container.

Layout: magic ``b"MXAT"``, version (u32), rank (u32), shape (rank x u64),
then little-endian float32 values in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MXAT"
VERSION = 1


def tensor_to_bytes(values) -> bytes:
    arr = np.ascontiguousarray(np.asarray(values), dtype="<f4")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 12 or data[:4] != MAGIC:
        raise ValueError("not an MXAT tensor container (bad magic)")
    version, rank = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise ValueError(f"unsupported MXAT version {version}")
    off = 12
    shape = struct.unpack_from(f"<{rank}Q", data, off)
    off += 8 * rank
    n = int(np.prod(shape)) if rank else 1
    if len(data) - off != 4 * n:
        raise ValueError(f"MXAT payload holds {len(data) - off} bytes, expected {4 * n}")
    return np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)


def save_tensor(path, values) -> None:
    Path(path).write_bytes(tensor_to_bytes(values))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
