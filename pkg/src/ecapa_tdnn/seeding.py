"""Named random sub-streams derived from one base seed."""
import zlib

import numpy as np


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for component ``name`` (e.g. "init", "crops")."""
    key = zlib.crc32(name.encode())
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, *map(int, extra)]))
