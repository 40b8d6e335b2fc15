"""Deterministic child RNG derivation.

Every random decision in a run draws from a child generator keyed by the run
seed plus a tag path (block index, stage name, epoch, ...). Child streams are
independent, so skipping one stage never shifts the randomness of another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


def child_rng(seed: int, *tags) -> np.random.Generator:
    """Derive a generator from ``seed`` and a stable tag path."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
