"""Derivation of independent random streams from a single master seed.

Every stochastic component draws from its own ``numpy.random.Generator``.
The stream for ``(label, index)`` is seeded by ``SeedSequence(master,
spawn_key=(crc32(label), index))`` so adding a new consumer never shifts the
draws seen by an existing one.
"""
from __future__ import annotations

import zlib

import numpy as np


def label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def substream(master_seed: int, label: str, index: int = 0) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(label_key(label), int(index)))
    return np.random.Generator(np.random.PCG64(seq))


def derived_seed(master_seed: int, label: str, index: int = 0) -> int:
    """A 63-bit integer seed for a child run (used for sweep cells and repeats)."""
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(label_key(label), int(index)))
    return int(seq.generate_state(1, dtype=np.uint64)[0]) & (2**63 - 1)
