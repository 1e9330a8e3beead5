"""Purpose-split random streams.

Every consumer of randomness draws from its own PCG64 stream derived from
``(seed, purpose)``, so changing how much one consumer draws never shifts
another. This keeps init and batch order fixed across sweep cells that
share a seed.
"""
import numpy as np

PURPOSES = {
    "data": 0,
    "test": 1,
    "init": 2,
    "shuffle": 3,
    "expand": 4,
    "probe": 5,
}


def stream(seed, purpose):
    if purpose not in PURPOSES:
        raise KeyError(f"unknown random stream purpose {purpose!r}")
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(PURPOSES[purpose],))
    return np.random.Generator(np.random.PCG64(ss))
