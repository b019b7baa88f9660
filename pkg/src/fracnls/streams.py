"""Reproducible random streams and order-preserving parallel maps.

Samples are grouped in fixed-size blocks.  Block ``b`` of master seed ``s``
draws from a Philox generator keyed by ``s`` with its counter's third word
set to ``b``; each block therefore owns 2^128 counter values and sample
``i`` is a pure function of ``(s, i)``.  Work is distributed block by block,
so results do not depend on how many workers run or in what order.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

BLOCK_SIZE = 1024

T = TypeVar("T")


def block_rng(master_seed: int, block: int) -> np.random.Generator:
    if not 0 <= master_seed < 2 ** 128:
        raise ValueError("master seed must lie in [0, 2^128)")
    if block < 0:
        raise ValueError("block index must be nonnegative")
    return np.random.Generator(np.random.Philox(key=master_seed, counter=block << 128))


def blocks_for(start: int, stop: int, block_size: int = BLOCK_SIZE) -> range:
    """Block indices covering sample indices ``[start, stop)``."""
    if stop <= start:
        return range(0)
    return range(start // block_size, (stop - 1) // block_size + 1)


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def ordered_map(func: Callable[..., T], items: Iterable, workers: int = 1) -> list[T]:
    """``list(map(func, items))``, optionally spread over worker processes.

    ``func`` must be picklable (a module-level function or a ``partial``).
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(func, items))


def chunked(count: int, size: int) -> list[tuple[int, int]]:
    """Fixed ``(start, stop)`` chunks of ``range(count)``; independent of workers."""
    return [(a, min(a + size, count)) for a in range(0, count, size)]


def concat(arrays: Sequence[np.ndarray], axis: int = 0) -> np.ndarray:
    return np.concatenate(arrays, axis=axis) if arrays else np.empty((0,))
