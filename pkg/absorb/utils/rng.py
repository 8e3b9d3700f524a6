"""
Seeded random number generation.

All randomness in absorb flows through numpy's PCG64 bit generator. Child
streams (per pair, per sweep cell, per run) are spawned from a
SeedSequence so that parallel workers own independent streams.
"""
import numpy as np

def get_rng(seed=None):
    """ Create a PCG64 generator (or pass an existing generator through). """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))

def spawn_seeds(seed, n):
    """ Derive `n` independent integer seeds from a parent seed. """
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]
