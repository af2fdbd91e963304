"""Named random streams derived from one seed."""
import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for stage ``name``; independent of how other stages consume randomness."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))
