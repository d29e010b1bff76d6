"""Seeded, splittable random streams.

Every stochastic component asks for its own stream keyed by a purpose string
and integers, so adding a draw in one place never shifts another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed`` split by ``keys``."""
    ss = np.random.SeedSequence([_key(seed), *(_key(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))
