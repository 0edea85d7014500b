"""Thread fan-out over fixed work units.

Work is always split into the same chunks regardless of the thread count, so
``URPA_THREADS=1`` and ``URPA_THREADS=8`` compute bit-identical results.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def n_threads() -> int:
    raw = os.environ.get("URPA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"URPA_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def map_chunks(fn: Callable[[list], list], items: Sequence, chunk_size: int) -> list:
    chunks = [list(items[i:i + chunk_size]) for i in range(0, len(items), chunk_size)]
    workers = min(n_threads(), len(chunks))
    if workers <= 1:
        results = [fn(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, chunks))
    return [r for part in results for r in part]
