"""Deterministic worker-pool helpers.

Work is always cut into fixed-size blocks and results are combined in block
order, so the outcome is bit-identical for any worker count.  Workers are
threads: every heavy block is numpy-bound and releases the GIL.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_WORKER_ENV = "DRIFTSCOPE_WORKERS"
_worker_override: int | None = None

# Fixed block sizes; independent of the worker count by design.
MC_BLOCK = 4096
ANGLE_BLOCK = 16


def set_workers(n: int | None) -> None:
    """Set the process-wide worker count (None restores env/default)."""
    global _worker_override
    _worker_override = None if n is None else max(1, int(n))


def worker_count() -> int:
    if _worker_override is not None:
        return _worker_override
    env = os.environ.get(_WORKER_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def map_blocks(fn, items, workers: int | None = None) -> list:
    """Apply fn to each item, preserving order; parallel when workers > 1."""
    items = list(items)
    n = worker_count() if workers is None else max(1, workers)
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))


def block_ranges(total: int, block: int) -> list[tuple[int, int]]:
    """Split [0, total) into fixed-size blocks (last one may be short)."""
    return [(lo, min(lo + block, total)) for lo in range(0, max(total, 0), block)]
