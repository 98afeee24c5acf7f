"""Counter-based RNG streams.

All randomness in the package flows from a single top-level seed through
named substreams, so individual components (suite generation, initial
noise, perturbation noise, SDE noise) can be varied independently and
candidates evaluated in any order produce identical results.

A stream is addressed by the top-level seed plus an integer path.  The
first path element is the substream name; the rest identify the consumer
(instance index, candidate lineage, ...).  Streams with distinct paths
are statistically independent.
"""

from __future__ import annotations

import numpy as np

# Named substreams.
SUITE = 0
INIT = 1
PERTURB = 2
SDE = 3

Seed = "int | tuple[int, ...]"


def stream(seed, *path: int) -> np.random.Generator:
    """Return the generator for the stream addressed by (seed, path).

    Philox is counter-based: spawning a stream costs O(1) and streams with
    different spawn keys never overlap.
    """
    if not all(isinstance(p, (int, np.integer)) for p in path):
        raise TypeError(f"stream path must be integers, got {path!r}")
    seq = np.random.SeedSequence(seed, spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))
