"""Process-level tuning for the allocation pattern of training."""
from __future__ import annotations

import ctypes
import ctypes.util
import functools
import logging
import sys

logger = logging.getLogger(__name__)

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


@functools.lru_cache(maxsize=None)
def retain_large_allocations(limit_bytes: int = 1 << 30) -> bool:
    """Keep activation-sized blocks on the glibc heap between steps.

    By default glibc maps every block above 32 MiB freshly and unmaps it on
    free, so each training step pays page faults on tens of megabytes of new
    memory. Raising the mmap and trim thresholds lets freed blocks be reused.
    Returns False (and changes nothing) off glibc.
    """
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = bool(mallopt(_M_MMAP_THRESHOLD, limit_bytes)) and bool(mallopt(_M_TRIM_THRESHOLD, 4 * limit_bytes))
    logger.debug("mallopt thresholds raised: %s", ok)
    return ok
