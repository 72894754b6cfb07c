"""Seeded random streams.

Every random draw in the package comes from a Philox (counter-based) bit
generator keyed by ``SeedSequence(seed, spawn_key=key)``.  The key identifies
what the randomness is for, e.g. ``(run, Stream.NOISE, step)``, so streams for
different runs, steps and samples are independent and can be regenerated in
any order.
"""

from __future__ import annotations

import enum

import numpy as np


class Stream(enum.IntEnum):
    INIT = 0
    BATCH = 1
    NOISE = 2
    COORDS = 3
    PROBE = 4
    RELEASE = 5
    DATA = 6


def substream(seed: int, *key: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, *key)``.

    Identical arguments give bit-identical streams.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))
