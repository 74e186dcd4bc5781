"""Worker-thread plumbing. SURFEL_THREADS picks the pool size globally."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

THREAD_ENV = "SURFEL_THREADS"


def thread_count(override: int | None = None) -> int:
    if override is not None:
        return max(1, int(override))
    raw = os.environ.get(THREAD_ENV, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def map_ordered(fn, items, threads: int):
    """Apply fn to items, preserving input order in the result list.

    Results are assembled by submission index, never by completion order,
    so output is identical for any thread count.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
