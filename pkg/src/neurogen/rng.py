"""Named random sub-streams derived from one experiment seed."""

import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *extra)``; stable across runs and platforms."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, *map(int, extra)]))
