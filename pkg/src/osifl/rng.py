"""Deterministic derivation of independent random streams.

Every stochastic step in a run draws from its own substream keyed by
(seed, purpose tags), so adding draws to one step never shifts another.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *tags: int | str) -> np.random.Generator:
    """Return a generator that is a pure function of (seed, tags).

    String tags are hashed with crc32 so the mapping is stable across
    processes and platforms.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            words.append(zlib.crc32(tag.encode("utf-8")))
        else:
            words.append(int(tag) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))
