"""Seeded randomness helpers.

All randomness in the toolkit flows through counter-based Philox streams keyed
by (seed, role, index), so results never depend on call order across
components, threads, or processes.  The same (seed, role, index) triple always
yields the same stream.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

# Stream roles.  A role plus an index selects one independent stream.
ROLE_MODEL = 0  # per-model noise/shuffle stream; index packs (round, node)
ROLE_INIT = 1  # parameter initialization
ROLE_GENERATE = 2  # sample generation
ROLE_PARTITION = 3  # silo partitioning shuffle
ROLE_SYNTH = 4  # synthetic data source
ROLE_SURVEY = 5  # survey pack shuffling


def stream(seed: int, role: int, index: int = 0) -> np.random.Generator:
    """Return the Philox stream for (seed, role, index)."""
    key = [seed & _MASK64, ((role & 0xFFFFFFFF) << 32) | (index & 0xFFFFFFFF)]
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, *path: int) -> int:
    """Derive a child integer seed from a base seed and an integer path."""
    ss = np.random.SeedSequence((seed & _MASK64, *path))
    return int(ss.generate_state(1, np.uint64)[0])


def model_stream_index(round_index: int, node_index: int) -> int:
    """Pack (round, node) into a model-stream index.

    (0, 0) maps to index 0, the stream a standalone model uses, so a
    single-node federation consumes exactly the noise a plain run would.
    """
    if not (0 <= round_index < 1 << 16 and 0 <= node_index < 1 << 16):
        raise ValueError("round and node indices must fit in 16 bits")
    return (round_index << 16) | node_index
