"""
Seed splitting for reproducible runs.

Every stochastic component draws from a generator derived from the root seed
and a tuple of integer keys. The stream depends only on (seed, keys), so
evaluation order and parallelism cannot change results.
"""
from numpy.random import Generator, SeedSequence, SFC64

SYNTH = 0
HMC = 1
DE = 2
BAYES_OPT = 3
SWEEP = 4


def spawn(seed: int, *keys: int) -> Generator:
    """Independent generator for the stream addressed by ``keys``."""
    return Generator(SFC64(SeedSequence(seed, spawn_key=tuple(int(k) for k in keys))))


def sub_seed(seed: int, *keys: int) -> int:
    """Derive a 32-bit integer seed for libraries that want a plain int."""
    return int(SeedSequence(seed, spawn_key=tuple(int(k) for k in keys)).generate_state(1)[0])
