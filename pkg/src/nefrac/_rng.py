"""Counter-based random streams.

Every stochastic consumer owns a Philox stream keyed by
(seed, family, replicate[, lane]) through a SeedSequence spawn key, so
replicates can run in any order, in any process, or be dropped mid-run
without changing any other replicate's draws. Families keep the process
kinds (total SDE, fraction SDE, Wright-Fisher reference, jump chains,
coalescent) from sharing streams under one seed.
"""

from __future__ import annotations

import numpy as np

FAMILY_TOTAL = 0
FAMILY_FRACTIONS = 1
FAMILY_WF = 2
FAMILY_GILLESPIE = 3
FAMILY_COALESCENT = 4


def stream(seed: int, family: int, *key: int) -> np.random.Generator:
    """Independent Generator for the given (seed, family, *key) address."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(family, *map(int, key)))
    return np.random.Generator(np.random.Philox(ss))
