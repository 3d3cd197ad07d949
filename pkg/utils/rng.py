# utils/rng.py
"""
Counter-based random streams.

Every path gets its own Philox generator keyed by (master seed, path index);
the top word of the counter carries a stream tag so that, for example, the
outer sampler and the inner paths of a nested estimate never overlap.
"""

from typing import Iterable

import numpy as np

UINT64_MAX = 2 ** 64 - 1

# Stream tags
PATHS = 0
OUTER = 1
SAMPLING = 2
RESTARTS = 3
TRIALS = 4


def check_seed(seed: int) -> int:
    seed = int(seed)
    if seed < 0 or seed > UINT64_MAX:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def stream(seed: int, index: int, tag: int = PATHS) -> np.random.Generator:
    """Generator for path `index` under master `seed`."""
    key = np.array([check_seed(seed), index], dtype=np.uint64)
    counter = np.array([0, 0, 0, tag], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def gaussian_block(seed: int, indices: Iterable[int], n_steps: int, dim: int,
                   tag: int = PATHS) -> np.ndarray:
    """Standard normal increments of shape (len(indices), n_steps, dim), one stream per row."""
    indices = list(indices)
    out = np.empty((len(indices), n_steps, dim))
    for row, index in enumerate(indices):
        out[row] = stream(seed, index, tag).standard_normal((n_steps, dim))
    return out


def describe_split(seed: int) -> dict:
    """Manifest entry describing how the master seed expands into streams."""
    return {
        "master_seed": check_seed(seed),
        "generator": "numpy.random.Philox",
        "key": "[master_seed, path_index]",
        "counter_top_word": "stream tag (0 paths, 1 outer, 2 sampling, 3 restarts, 4 trials)",
    }
