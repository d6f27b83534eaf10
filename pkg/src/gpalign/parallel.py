"""Deterministic helper for running independent per-curve work on threads."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor


def parallel_map(fn, items, threads: int = 1) -> list:
    """Apply fn to every item, preserving order; threads <= 1 runs inline.

    Tasks must be independent; results are merged by index, so the output is
    identical for any thread count.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
