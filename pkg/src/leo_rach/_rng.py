"""Named, reproducible RNG substreams derived from one top-level seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Return a generator for the substream ``name`` (optionally indexed).

    The same ``(seed, name, *index)`` always yields the same stream, and
    distinct names never share state.
    """
    key = [int(seed), zlib.crc32(name.encode("utf-8"))]
    key.extend(int(i) for i in index)
    return np.random.default_rng(np.random.SeedSequence(key))
