"""Named, seed-derived random streams.

Every consumer of randomness asks for its own stream by name so that, for
example, adding an adversary head never shifts the encoder initialization.
"""
import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
