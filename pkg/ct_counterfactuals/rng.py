"""Seeded random generators.

Every random draw in the package goes through `make_rng`, which pairs numpy's
Generator with the Philox4x64 counter-based bit generator. Philox streams are
defined by the key alone, so a given seed yields the same bytes everywhere.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Return a Philox-backed generator for a non-negative integer seed."""
    if seed < 0:
        raise ValueError(f"Seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.Philox(key=int(seed)))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a seed for an independent sub-stream."""
    return int(rng.integers(0, 2**63 - 1))
