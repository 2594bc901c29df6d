"""Counter-based random streams.

Every stochastic quantity is drawn from its own Philox4x64-10 stream. The
stream for ``substream(seed, *keys)`` is keyed by
``numpy.random.SeedSequence(entropy=seed, spawn_key=keys)``, so a draw depends
only on the master seed and its integer address (for example
``(run, variable)``), never on scheduling or on how many other draws were made
before it.
"""

from __future__ import annotations

import numpy as np

# stream tags; stable integers so addresses never change between versions
BOOTSTRAP = 1
SIMULATION = 2
# 3 is retired; the null companion run reuses the simulation streams
SIMILARITY = 4


def substream(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def bootstrap_rows(n: int, seed: int, replicate: int) -> np.ndarray:
    """Row positions of bootstrap replicate ``replicate`` (patients, with replacement)."""
    return substream(seed, BOOTSTRAP, replicate).integers(0, n, size=n)
