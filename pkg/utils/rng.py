"""
Seeded random streams.

Every stream is a Philox-4x64 counter-based generator keyed by a
``SeedSequence``. Substream ``k`` of a seed is the child with spawn key
``(k,)``, so realization ``k`` draws the same numbers regardless of how many
realizations are generated or in which order.
"""

import functools
from typing import Tuple

import numpy as np

RNG_ALGORITHM = "numpy Philox-4x64 (SeedSequence spawn keys per substream)"


def generator(seed: int, *path: int) -> np.random.Generator:
    """Generator for ``seed`` and the substream path (k1, k2, ...)."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in path))
    return np.random.Generator(np.random.Philox(sequence))


def substream(seed: int, k: int) -> np.random.Generator:
    return generator(seed, k)


@functools.lru_cache(maxsize=64)
def derived_seed(seed: int, *path: int) -> int:
    """A 63-bit integer seed derived from ``seed`` and a substream path."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in path))
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def standard_normal_columns(seed: int, size: int, indices: Tuple[int, ...]) -> np.ndarray:
    """Matrix whose column j holds ``size`` standard normals of substream indices[j]."""
    out = np.empty((size, len(indices)))
    for j, k in enumerate(indices):
        out[:, j] = substream(seed, k).standard_normal(size)
    return out
