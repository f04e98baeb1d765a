"""Seed splitting.

Every random draw in a run comes from a generator keyed by
``(master seed, phase, call index, simulator index)``; string parts are
mapped to integers with CRC32. The mapping is independent of worker count
and of scheduling, which is what makes reports reproducible byte for byte.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode())


class Streams:
    def __init__(self, seed: int):
        self.seed = int(seed)

    def get(self, *key) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=tuple(_key_part(k) for k in key))
        return np.random.Generator(np.random.PCG64(ss))
