"""Seeded, splittable random streams.

Every consumer of randomness asks for a stream keyed by ``(seed, *keys)``.
Streams with different keys are statistically independent, and a stream is
fully determined by its key, so results never depend on evaluation order or
worker count.
"""

import numpy as np

# stage tags for spawn keys
DATA = 1
INIT = 2
TRAIN = 3
HELDOUT = 4
PAIRS = 5
EVAL = 6
RDPO = 7
MONITOR = 8


def stream(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(rng: np.random.Generator) -> int:
    """Draw a 63-bit seed from ``rng`` for handing to a child computation."""
    return int(rng.integers(0, 2**63 - 1))
