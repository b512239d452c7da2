"""Seeded NumPy generators for initial conditions."""

from __future__ import annotations

import numpy as np


def seeded_rng(seed: int) -> np.random.Generator:
    """Return a deterministic NumPy RNG for a given seed."""
    return np.random.default_rng(int(seed))


def initial_states(
    seed: int, n: int, state_dim: int, low: float, high: float
) -> np.ndarray:
    """Draw an ``(n, state_dim)`` array of initial states uniformly in a box."""
    if high <= low:
        raise ValueError("x0_range must satisfy low < high")
    rng = seeded_rng(seed)
    return rng.uniform(low, high, size=(n, state_dim))
