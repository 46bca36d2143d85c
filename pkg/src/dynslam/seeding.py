"""Deterministic RNG derivation.

Every random draw in the system comes from a generator derived here, keyed
by the master seed plus a small integer path (domain tag, frame id, iteration
...).  Identical keys give bitwise-identical streams on every platform, and
streams for different keys are statistically independent.
"""

import numpy as np

# Domain tags; keep values stable, they are part of run reproducibility.
DOMAIN_RANSAC = 1
DOMAIN_PIXELS = 2
DOMAIN_RAY_DEPTHS = 3
DOMAIN_RESERVOIR = 4
DOMAIN_GBA = 5
DOMAIN_INIT_FIELD = 6
DOMAIN_SYNTH_NOISE = 7
DOMAIN_TRACK = 8


def rng_for(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *[int(k) for k in key]]))
