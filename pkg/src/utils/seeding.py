"""
Deterministic seed handling.

All randomness flows from one 64-bit seed. Streams are derived with
splitmix64 and handed to numpy's PCG64 generator.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(value: int) -> int:
    """One splitmix64 output for state ``value`` (state advanced by the gamma)."""
    z = (value + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def mix_seed(seed: int, stream: int) -> int:
    """seed_node = splitmix64(seed + gamma * (stream + 1)) mod 2^64."""
    return splitmix64((seed + GOLDEN_GAMMA * (stream + 1)) & MASK64)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(splitmix64(seed & MASK64)))
