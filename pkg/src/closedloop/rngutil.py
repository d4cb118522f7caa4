"""Deterministic random stream derivation.

Every random draw in the toolkit comes from a named child of one 64-bit run
seed, so results never depend on call order or worker scheduling.
"""

from __future__ import annotations

import zlib

import numpy as np


def child_seed(seed: int, *tags) -> np.random.SeedSequence:
    """Derive a named child SeedSequence from a run seed.

    Tags may be strings or ints; strings are hashed with crc32 so the
    derivation is stable across processes and Python versions.
    """
    key = []
    for tag in tags:
        if isinstance(tag, str):
            key.append(zlib.crc32(tag.encode("utf-8")))
        elif isinstance(tag, (int, np.integer)):
            key.append(int(tag) & 0xFFFFFFFF)
        else:
            raise TypeError(f"tag must be str or int, got {type(tag)!r}")
    return np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                  spawn_key=tuple(key))


def child_rng(seed: int, *tags) -> np.random.Generator:
    """Generator seeded by child_seed(seed, *tags)."""
    return np.random.Generator(np.random.PCG64(child_seed(seed, *tags)))
