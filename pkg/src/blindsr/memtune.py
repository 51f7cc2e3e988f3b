"""Process-level glibc malloc tuning for large-array churn.

Every optimizer step allocates and frees hundreds of megabytes of conv
scratch buffers. glibc serves blocks this size with mmap and returns them
to the kernel on free, so each step pays the page-fault cost of touching
the memory again. Raising the mmap/trim thresholds keeps those blocks on
the recycled heap, which removes most of that cost. Safe to call more
than once; a no-op on non-glibc platforms.
"""

from __future__ import annotations

import ctypes
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3

_applied = False


def keep_large_buffers_resident():
    global _applied
    if _applied or not sys.platform.startswith("linux"):
        return
    _applied = True
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
    except OSError:
        pass
