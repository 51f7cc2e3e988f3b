"""Binary tensor container used by datasets, checkpoints and exports.

Layout (all integers little-endian):
    4 bytes   magic ``RDT1``
    u32       rank
    rank*u32  dimension sizes
    f64[...]  payload, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RDT1"


class FormatError(ValueError):
    """The byte stream does not follow the expected container layout."""


def dump_tensor(arr: np.ndarray) -> bytes:
    """Serialize an array to RDT1 bytes (converted to float64)."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    head = MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def load_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor from a buffer.

    Returns:
        (array, next_offset) so callers can read streams of tensors.
    """
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError(f"bad tensor magic {buf[offset:offset + 4]!r}, expected {MAGIC!r}")
    offset += 4
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = offset + 8 * count
    if end > len(buf):
        raise FormatError(
            f"truncated tensor payload: need {end - offset} bytes, have {len(buf) - offset}"
        )
    arr = np.frombuffer(buf[offset:end], dtype="<f8").reshape(dims).copy()
    return arr, end


def write_tensor(path, arr: np.ndarray):
    Path(path).write_bytes(dump_tensor(arr))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = load_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return arr
