"""Counter-based random streams.

Every stochastic routine derives its generators from ``(seed, stream index)``
through ``SeedSequence.spawn`` and the Philox bit generator, so a result only
depends on the seed and on how the work is chunked, never on how many
threads executed the chunks.
"""

from concurrent.futures import ThreadPoolExecutor
import os

import numpy as np


def streams(seed, n):
    """Return ``n`` independent Philox generators for ``seed``."""
    children = np.random.SeedSequence(int(seed)).spawn(int(n))
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def stream(seed, index):
    """The ``index``-th stream of ``seed`` (same as ``streams(seed, index + 1)[index]``)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


_THREADS = None


def set_threads(n):
    global _THREADS
    _THREADS = None if n is None else max(1, int(n))


def get_threads():
    if _THREADS is not None:
        return _THREADS
    return os.cpu_count() or 1


def parallel_map(fn, items, threads=None):
    """Ordered map over ``items``; runs on a thread pool when more than one thread is allowed."""
    items = list(items)
    n = get_threads() if threads is None else threads
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
