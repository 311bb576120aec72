"""Thread fan-out with results returned in input order (deterministic reductions)."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ENV_THREADS = "F2F_THREADS"


def thread_count(default: int = 1) -> int:
    raw = os.environ.get(ENV_THREADS)
    if raw is None or raw.strip() == "":
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{ENV_THREADS} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError(f"{ENV_THREADS} must be >= 1")
    return n


def ordered_map(fn, items, threads: int | None = None) -> list:
    """``[fn(x) for x in items]``, optionally on a thread pool; output order is input order."""
    items = list(items)
    n = thread_count() if threads is None else threads
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
