"""Counter-based random streams keyed by ``(master_seed, task_index, ...)``.

Each task draws from its own Philox stream, so results do not depend on how
tasks are scheduled across workers.
"""
from __future__ import annotations

import numpy as np


def task_rng(seed: int, *task: int) -> np.random.Generator:
    key = np.random.SeedSequence([int(seed), *map(int, task)])
    return np.random.Generator(np.random.Philox(key))


def task_seed(seed: int, *task: int) -> int:
    """A 63-bit integer derived from the same key, for nested streams."""
    key = np.random.SeedSequence([int(seed), *map(int, task)])
    return int(key.generate_state(2, np.uint64)[0] >> np.uint64(1))
