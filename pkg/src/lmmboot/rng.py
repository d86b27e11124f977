"""Counter-based random streams.

Every replicate, inner replicate and simulation run gets its own Philox
stream addressed by ``(seed, purpose)`` (the key) and up to three integer
counters placed in the upper counter words.  The lowest counter word is the
one Philox advances while drawing, so streams never overlap and the draws of
replicate ``b`` do not depend on which worker computes it or in what order.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

OUTER_SEMIPARAMETRIC = 1
OUTER_PARAMETRIC = 2
INNER = 3
STUDY_RUN = 4
BOOT_SEED = 5

_MASK64 = (1 << 64) - 1


@lru_cache(maxsize=256)
def _key(seed: int, purpose: int) -> tuple[int, int]:
    state = np.random.SeedSequence([seed & _MASK64, seed >> 64, purpose]).generate_state(2, np.uint64)
    return int(state[0]), int(state[1])


def stream(seed: int, purpose: int, *counters: int) -> np.random.Generator:
    """Generator for the stream addressed by ``(seed, purpose, counters)``."""
    if len(counters) > 3:
        raise ValueError("at most three counters")
    words = [0, 0, 0, 0]
    for i, c in enumerate(counters):
        words[i + 1] = int(c) & _MASK64
    key = np.array(_key(int(seed), int(purpose)), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=np.array(words, dtype=np.uint64), key=key))


def derived_seed(seed: int, purpose: int, *counters: int) -> int:
    """A 63-bit seed derived from a stream, for nested components."""
    return int(stream(seed, purpose, *counters).integers(0, 2**63 - 1))
