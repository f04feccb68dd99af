"""Deterministic seed derivation.

Every stochastic component derives its RNG from a 64-bit mix of the global
seed and stable integer identifiers (scene id, instance index), so parallel
and serial schedules produce identical streams.
"""

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x):
    """One SplitMix64 scrambling round (Steele et al.), value in [0, 2**64)."""
    x = (x + _GAMMA) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (x ^ (x >> 31)) & _MASK64


def mix_seed(*parts):
    """Fold integer identifiers into one 64-bit seed.

    mix_seed(a, b, ...) chains SplitMix64: h <- splitmix64(h ^ part) for each
    part, starting from h = splitmix64(first part). Order matters.
    """
    if not parts:
        raise ValueError("mix_seed requires at least one part")
    h = splitmix64(int(parts[0]) & _MASK64)
    for p in parts[1:]:
        h = splitmix64(h ^ (int(p) & _MASK64))
    return h


def rng_for(*parts):
    """A numpy Generator seeded from mix_seed(*parts)."""
    return np.random.default_rng(mix_seed(*parts))
