"""Named random sub-streams derived from a single integer seed.

Each consumer (parameter init, batch shuffling, cropping, subsampling, ...)
draws from its own generator, so adding draws in one consumer never
perturbs another.
"""
import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])
