"""Named random sub-streams derived from one run seed."""
import zlib

import numpy as np


def rng_stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name`` (e.g. "init", "shuffle", "attack").

    Streams are keyed by a stable hash of the name, so drawing from one never
    shifts another.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])
