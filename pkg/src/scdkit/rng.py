"""Deterministic RNG splitting.

All randomness in a run flows from one root seed. Each consumer derives its
own generator from (root seed, consumer name), so adding a consumer never
shifts the streams of existing ones.
"""

import zlib

import numpy as np


def derive(root_seed, *names):
    """Generator keyed by the root seed plus a path of consumer names."""
    keys = [int(root_seed) & 0xFFFFFFFF]
    for name in names:
        keys.append(zlib.crc32(str(name).encode("utf-8")))
    return np.random.default_rng(keys)
