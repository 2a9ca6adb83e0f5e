"""
Random Streams
==============

Every random draw in cmdp-lab comes from a counter-based Philox generator
seeded by ``(seed, stream)``. Dataset generation, solver-side draws and
verification draws use separate streams, so changing how many numbers one
consumer draws never shifts another consumer's sequence.
"""

from enum import IntEnum

import numpy as np


class RngStream(IntEnum):
    """Purpose tags used as the SeedSequence spawn key."""

    DATASET = 0
    SOLVER = 1
    VERIFY = 2
    INSTANCE = 3


def make_rng(seed: int, stream: RngStream) -> np.random.Generator:
    """Build the generator for one purpose of one seed."""
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(sequence))
