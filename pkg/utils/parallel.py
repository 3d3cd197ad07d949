# utils/parallel.py
"""
Block-parallel mapping over path indices.
Blocks are fixed by the block size alone, so results are identical for any
worker count; callers reduce the returned list in block order.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

T = TypeVar("T")

DEFAULT_BLOCK_SIZE = 1024


def default_threads() -> int:
    return max(1, int(os.getenv("HAMLAB_THREADS", "1")))


def default_block_size() -> int:
    return max(1, int(os.getenv("HAMLAB_BLOCK_SIZE", str(DEFAULT_BLOCK_SIZE))))


def blocks(n_items: int, block_size: int) -> List[range]:
    return [range(start, min(start + block_size, n_items)) for start in range(0, n_items, block_size)]


def map_blocks(fn: Callable[[range], T], n_items: int, threads: int = 0,
               block_size: int = 0) -> List[T]:
    """Apply `fn` to consecutive index ranges and return results in block order."""
    threads = threads or default_threads()
    block_size = block_size or default_block_size()
    parts: Sequence[range] = blocks(n_items, block_size)
    if threads == 1 or len(parts) <= 1:
        return [fn(part) for part in parts]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, parts))
