"""Stable 64-bit hashing used for ring placement and KV block keys.

All hashes are built from the SplitMix64 finalizer (Steele, Lea & Flood 2014),
which is a fixed, non-cryptographic bijection on 64-bit integers. Results are
identical on every platform because only wrapping 64-bit integer arithmetic is
involved.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def mix64_array(x: np.ndarray) -> np.ndarray:
    """Vectorised :func:`mix64` over a ``uint64`` array (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64) + np.uint64(GOLDEN)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def combine(a: int, b: int) -> int:
    """Order-sensitive combination of two 64-bit values."""
    return mix64((mix64(a) * 31 + b) & MASK64)


def hash_ints(values: Iterable[int]) -> int:
    """Hash a sequence of integers (order-sensitive)."""
    h = 0x6A09E667F3BCC908
    for v in values:
        h = combine(h, int(v) & MASK64)
    return h


def hash_token_block(tokens: np.ndarray) -> int:
    """Hash one block of token ids.

    Each token is salted with its position inside the block before mixing, so
    permutations of the same multiset hash differently.
    """
    tokens = np.asarray(tokens, dtype=np.uint64)
    positions = np.arange(tokens.size, dtype=np.uint64) * np.uint64(GOLDEN)
    with np.errstate(over="ignore"):
        lanes = mix64_array(tokens ^ positions)
        acc = int(lanes.sum(dtype=np.uint64))
    return mix64(acc ^ tokens.size)
