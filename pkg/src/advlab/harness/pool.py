"""Ordered worker pool capped by ``ADVLAB_THREADS`` (0 or unset = CPU count).

Work is split into fixed-size chunks whose boundaries do not depend on the
thread count, and results are merged in ascending chunk order, so the output
is identical for any pool size.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

CHUNK = 64


def thread_count() -> int:
    raw = os.environ.get("ADVLAB_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"ADVLAB_THREADS must be an integer, got {raw!r}") from exc
    if n < 0:
        raise ValueError("ADVLAB_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def ordered_map(fn: Callable, items: Sequence, threads: int | None = None) -> list:
    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def chunked(fn: Callable[[np.ndarray], object], n: int, chunk: int = CHUNK, threads: int | None = None) -> list:
    """Call ``fn(index_array)`` on consecutive index chunks of ``range(n)``."""
    parts = [np.arange(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    return ordered_map(fn, parts, threads)
