"""RTEN tensor container.

Layout (all integers unsigned 32-bit little-endian)::

    b"RTEN" | version=1 | dtype=1 (float32 LE) | ndim | dim_0 .. dim_{ndim-1} | payload

The payload is the row-major float32 data, ``prod(dims) * 4`` bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RTEN"
VERSION = 1
DTYPE_F32 = 1
MAX_NDIM = 8
MAX_ELEMENTS = 1 << 28


class RtenError(ValueError):
    def __init__(self, msg: str, offset: int, source: str = "<bytes>"):
        super().__init__(f"{source}: offset {offset}: {msg}")
        self.offset = offset


def encode(arr) -> bytes:
    a = np.asarray(arr, dtype="<f4", order="C")  # keeps 0-d arrays 0-d
    head = MAGIC + struct.pack("<III", VERSION, DTYPE_F32, a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes(order="C")


def decode(buf: bytes, offset: int = 0, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; return it and the end offset."""
    pos = offset

    def need(n: int, what: str) -> None:
        if pos + n > len(buf):
            raise RtenError(f"truncated {what}: need {n} bytes, have {len(buf) - pos}", pos, source)

    need(4, "magic")
    if buf[pos:pos + 4] != MAGIC:
        raise RtenError(f"bad magic {bytes(buf[pos:pos + 4])!r}", pos, source)
    pos += 4
    need(12, "header")
    version, dtype, ndim = struct.unpack_from("<III", buf, pos)
    if version != VERSION:
        raise RtenError(f"unsupported version {version}", pos, source)
    if dtype != DTYPE_F32:
        raise RtenError(f"unsupported dtype code {dtype}", pos + 4, source)
    if ndim > MAX_NDIM:
        raise RtenError(f"ndim {ndim} exceeds {MAX_NDIM}", pos + 8, source)
    pos += 12
    need(4 * ndim, "dimensions")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    count = 1
    for i, d in enumerate(dims):
        count *= d
        if d == 0 or count > MAX_ELEMENTS:
            raise RtenError(f"dimension overflow or zero size at dim {i} ({d})", pos + 4 * i, source)
    pos += 4 * ndim
    need(4 * count, "payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise RtenError("payload contains NaN or Inf", pos, source)
    return arr, pos + 4 * count


def save(path, arr) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode(buf, 0, str(path))
    if end != len(buf):
        raise RtenError(f"{len(buf) - end} trailing bytes", end, str(path))
    return arr
