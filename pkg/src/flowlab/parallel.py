"""Deterministic chunked evaluation over batches of points.

Work is split into chunks of a fixed size that does not depend on the
number of worker threads, and results are concatenated in chunk order.
Any reduction happens afterwards on the assembled array, so outputs are
bitwise identical for every thread count.
"""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK_SIZE = 2048

_threads = None


def set_threads(n):
    """Set the worker count used by :func:`chunked_map` (``None`` resets)."""
    global _threads
    if n is not None and int(n) < 1:
        raise ValueError("thread count must be >= 1")
    _threads = None if n is None else int(n)


def get_threads():
    if _threads is not None:
        return _threads
    env = os.environ.get("FLOWLAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def chunked_map(fn, points, chunk_size=CHUNK_SIZE):
    """Apply ``fn`` to row-chunks of ``points`` and stack the results in order."""
    points = np.asarray(points)
    n = points.shape[0]
    if n <= chunk_size:
        return fn(points)
    bounds = [(i, min(i + chunk_size, n)) for i in range(0, n, chunk_size)]
    threads = get_threads()
    if threads == 1:
        parts = [fn(points[a:b]) for a, b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda ab: fn(points[ab[0]:ab[1]]), bounds))
    return np.concatenate(parts, axis=0)
