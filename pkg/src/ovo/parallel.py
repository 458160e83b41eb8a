"""Fixed-chunk parallel map and order-stable reductions.

Work is always split into chunks of a fixed size that does not depend on the
worker count, and partial results are combined with a fixed pairwise tree, so
outputs are bit-identical for any number of workers.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")


def default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:  # pragma: no cover - non-Linux
        return max(1, os.cpu_count() or 1)


def chunk_bounds(n: int, chunk: int) -> list[tuple[int, int]]:
    return [(s, min(s + chunk, n)) for s in range(0, n, chunk)]


def pmap(fn: Callable[..., T], items: Sequence, workers: int = 1) -> list[T]:
    """Ordered map; threads are used when workers > 1 (kernels release the GIL)."""
    if workers < 1:
        raise ValueError("worker count must be >= 1")
    if workers == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def pairwise_sum(parts: Sequence[T]) -> T:
    """Sum in a fixed balanced-tree order: ((p0+p1)+(p2+p3))+..."""
    if not parts:
        raise ValueError("nothing to reduce")
    level = list(parts)
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]
