"""
Counter-based seed derivation.

Every random stream in the lab is keyed by a tuple of non-negative integers
(master seed, instance index, purpose tag, replicate, ...). The tuple is folded
through the SplitMix64 finalizer so that streams are independent of the order
in which they are created and need no shared generator state.
"""
from typing import Iterable

import numpy as np

from app.utils.errors import ConfigError

MASK64 = (1 << 64) - 1

# Purpose tags keep streams for different uses of one instance apart.
STREAM_DISORDER = 0
STREAM_SEARCH = 1
STREAM_DYNAMICS = 2
STREAM_ESCAPE = 3
STREAM_BOUNDS = 4
STREAM_NORM = 5
STREAM_START = 6


def splitmix64(x: int) -> int:
    """SplitMix64 finalizer of a 64-bit integer"""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(*keys: int) -> int:
    """
    Fold a tuple of keys into one 64-bit seed

    Args:
        keys: Non-negative integers, most significant first (master seed first)

    Returns:
        int: Derived 64-bit seed
    """
    if not keys:
        raise ConfigError("derive_seed needs at least one key")
    h = splitmix64(int(keys[0]) & MASK64)
    for key in keys[1:]:
        if key < 0:
            raise ConfigError(f"seed keys must be non-negative, got {key}")
        h = splitmix64(h ^ (int(key) & MASK64))
    return h


def make_rng(*keys: int) -> np.random.Generator:
    """PCG64 generator on the stream derived from keys"""
    return np.random.Generator(np.random.PCG64(derive_seed(*keys)))


def spawn_seeds(master_seed: int, tag: int, count: int) -> Iterable[int]:
    """Derived seeds for `count` replicates of one purpose"""
    return [derive_seed(master_seed, tag, rep) for rep in range(count)]
