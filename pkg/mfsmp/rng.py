"""
Counter-based random streams.

Each (seed, channel, particle) triple addresses its own Philox stream; the
k-th draw of a stream is the k-th counter block, so a draw is fully
determined by (seed, channel, particle, step) and never by the order in
which worker threads run.
"""

from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from typing import Callable, List, Sequence, TypeVar

import numpy as np

BROWNIAN = 0
CHAIN = 1
CONTROL = 2

T = TypeVar("T")


@lru_cache(maxsize=64)
def _key(seed: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)


def stream(seed: int, channel: int, particle: int) -> np.random.Generator:
    """Independent generator for one (channel, particle) pair."""
    counter = np.array([0, 0, particle, channel], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=_key(seed), counter=counter))


def map_ordered(func: Callable[[int], T], indices: Sequence[int], threads: int = 1) -> List[T]:
    """Apply ``func`` to every index, returning results in index order."""
    if threads <= 1 or len(indices) <= 1:
        return [func(i) for i in indices]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(func, indices))
