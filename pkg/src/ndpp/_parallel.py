"""Optional block-level thread parallelism, capped by the NDPP_THREADS env var."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("NDPP_THREADS", "1")))
    except ValueError:
        return 1


def map_blocks(fn, items):
    """Apply `fn` to independent block inputs, threaded when allowed.

    Blocks record disjoint subgraphs, so concurrent construction is safe.
    """
    items = list(items)
    workers = min(thread_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
