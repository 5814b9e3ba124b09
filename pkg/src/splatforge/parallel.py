"""Deterministic task fan-out for tile-parallel rendering.

Work items are mapped across a thread pool but results always come back in
submission order, so reductions downstream are independent of worker count.
"""

import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV_VAR = "SPLATFORGE_THREADS"


def resolve_threads(explicit=None):
    """Thread count from an explicit setting, else the environment, else 1."""
    if explicit is not None:
        n = int(explicit)
    else:
        n = int(os.environ.get(THREADS_ENV_VAR, "1"))
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    return n


def run_tasks(fn, items, n_threads):
    """Apply `fn` to each item, in parallel if asked; results in input order."""
    items = list(items)
    if n_threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(fn, items))
