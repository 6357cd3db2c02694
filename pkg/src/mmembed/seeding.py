"""Named random sub-streams derived from one root seed."""
import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *extra)``; same inputs give the same draws."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(key))
