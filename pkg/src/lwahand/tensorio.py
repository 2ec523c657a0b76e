"""LWAT binary tensor format.

Record layout (all integers little-endian)::

    b"LWAT" | version:u32 | dtype:u8 | rank:u32 | dims:u64 * rank | payload

``dtype`` is 4 for float32 and 8 for float64; the payload is little-endian
IEEE-754 in row-major order. A *bundle* is a plain concatenation of records.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .numerics import NumericError

MAGIC = b"LWAT"
VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class FormatError(ValueError):
    """Raised for malformed LWAT data."""


def encode(arr, dtype: int = 8) -> bytes:
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype byte {dtype}")
    arr = np.asarray(arr)
    header = MAGIC + struct.pack("<IBI", VERSION, dtype, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, next offset)."""
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError("LWAT magic mismatch")
    try:
        version, dtype, rank = struct.unpack_from("<IBI", buf, offset + 4)
    except struct.error as exc:
        raise FormatError("LWAT header truncated") from exc
    if version != VERSION:
        raise FormatError(f"LWAT version {version} unsupported")
    if dtype not in _DTYPES:
        raise FormatError(f"LWAT dtype byte {dtype} unsupported")
    pos = offset + 13
    try:
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    except struct.error as exc:
        raise FormatError("LWAT dims truncated") from exc
    pos += 8 * rank
    count = int(np.prod(dims)) if rank else 1
    nbytes = count * _DTYPES[dtype].itemsize
    if len(buf) < pos + nbytes:
        raise FormatError("LWAT payload truncated")
    arr = np.frombuffer(buf, dtype=_DTYPES[dtype], count=count, offset=pos).reshape(dims)
    arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("LWAT payload contains non-finite values")
    return arr, pos + nbytes


def save(path, arr, dtype: int = 8) -> None:
    Path(path).write_bytes(encode(arr, dtype))


def load(path) -> np.ndarray:
    arr, end = decode(Path(path).read_bytes())
    return arr


def save_bundle(path, arrays, dtype: int = 8) -> None:
    Path(path).write_bytes(b"".join(encode(a, dtype) for a in arrays))


def load_bundle(path) -> list[np.ndarray]:
    buf = Path(path).read_bytes()
    out, pos = [], 0
    while pos < len(buf):
        arr, pos = decode(buf, pos)
        out.append(arr)
    if not out:
        raise FormatError("LWAT magic mismatch")
    return out
