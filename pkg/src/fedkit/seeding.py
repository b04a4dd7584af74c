"""Deterministic RNG derivation from structured keys.

Every stochastic choice in the package draws from a generator derived
from an explicit key tuple, so runs are reproducible bit-for-bit and
sub-streams (per client, per round, per parameter) are independent.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_rng(*keys: int | str) -> np.random.Generator:
    """Build a Generator from a mixed tuple of ints and strings.

    Strings are hashed with CRC32 so parameter names and tags can be
    part of the key. Ints may be any Python int; they are masked to
    64 bits (negative values wrap).
    """
    entropy = []
    for k in keys:
        if isinstance(k, str):
            entropy.append(zlib.crc32(k.encode("utf-8")))
        elif isinstance(k, (int, np.integer)):
            entropy.append(int(k) & _MASK64)
        else:
            raise TypeError(f"rng key must be int or str, got {type(k).__name__}")
    return np.random.default_rng(np.random.SeedSequence(entropy))
