"""Deterministic random streams.

Every randomized subsystem draws from its own child generator derived
from the master seed, so changing how one subsystem consumes randomness
never perturbs the others.  The splitting rule is:

    PCG64(SeedSequence(entropy=master_seed, spawn_key=(STREAM_ID, index)))

PCG64/SeedSequence are fully specified algorithms, so runs reproduce
bit-identically across machines.
"""

import numpy as np

STREAMS = {
    "init": 1,       # parameter initialization
    "dropout": 2,    # train-time dropout masks
    "sampler": 3,    # class-weighted bag sampling
    "data": 4,       # synthetic dataset generation
    "bench": 5,      # random benchmark inputs
    "metrics": 6,    # k-means seeding and related draws
    "igi": 7,        # gradient-interference instance sampling
    "gradcheck": 8,  # finite-difference suite inputs
}


def child_rng(master_seed: int, stream: str, index: int = 0) -> np.random.Generator:
    """Child generator for one named subsystem stream."""
    key = STREAMS[stream]
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(key, int(index)))
    return np.random.Generator(np.random.PCG64(seq))
