"""Seeded random streams.

All stochastic code draws from ``numpy.random.Generator`` backed by Philox-4x64
(a counter-based bit generator whose output is defined by the algorithm, not
the platform). Independent streams are derived from one integer seed plus a
tuple of string/int keys via ``SeedSequence.spawn_key``, so adding a new
consumer never shifts the numbers another consumer sees.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    return zlib.crc32(str(k).encode("utf-8"))


def make_rng(seed: int, *keys) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit integer suitable as the seed of a derived stream."""
    return int(rng.integers(0, 2**63 - 1))
