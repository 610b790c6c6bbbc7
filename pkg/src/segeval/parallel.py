"""Ordered worker pool: results come back in input order, so merges are deterministic."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from functools import reduce

WORKERS_ENV = "SEGEVAL_WORKERS"


def resolve_workers(flag=None) -> int:
    if flag is not None:
        n = int(flag)
    else:
        n = int(os.environ.get(WORKERS_ENV, "1"))
    if n < 1:
        raise ValueError("worker count must be at least 1")
    return n


def pmap(fn, items, workers=1, chunksize=None):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    if chunksize is None:
        chunksize = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))


def map_reduce(fn, items, workers=1, initial=None):
    """``reduce(+)`` over ``pmap`` results, folded in input order."""
    parts = pmap(fn, items, workers)
    if initial is not None:
        return reduce(lambda a, b: a + b, parts, initial)
    return reduce(lambda a, b: a + b, parts)
