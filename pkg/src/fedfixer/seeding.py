"""Deterministic seed derivation.

Every stochastic component of a run draws from a generator obtained through
`derive_rng`, keyed by the master seed plus a structured path (stream tag,
trial index, round index, client id, ...). Two consequences:

* a whole experiment is a pure function of its master seed, and
* streams for different (round, client) pairs are statistically independent,
  so client updates may execute in any order or in parallel without changing
  results.
"""

from __future__ import annotations

import numpy as np

# Stream tags. Values are arbitrary but frozen: changing them changes every
# derived stream and therefore every result.
STREAM_DATASET = 1
STREAM_PARTITION = 2
STREAM_NOISE = 3
STREAM_CORRUPT = 4
STREAM_INIT = 5
STREAM_SAMPLING = 6
STREAM_CLIENT = 7
STREAM_TRIAL = 8


def derive_rng(master_seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream identified by (master_seed, *path)."""
    return np.random.default_rng(_seed_seq(master_seed, *path))


def child_seed(master_seed: int, *path: int) -> int:
    """64-bit seed derived from (master_seed, *path); usable as a new master."""
    state = _seed_seq(master_seed, *path).generate_state(2, np.uint32)
    return int(state.view(np.uint64)[0])


def _seed_seq(master_seed: int, *path: int) -> np.random.SeedSequence:
    entropy = [int(master_seed)] + [int(p) for p in path]
    if any(e < 0 for e in entropy):
        raise ValueError("seed path components must be non-negative")
    return np.random.SeedSequence(entropy)
