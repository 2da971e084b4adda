"""Seeded random streams.

Every random draw in the package comes from a counter-based Philox generator
keyed by ``SeedSequence([master_seed, purpose_code, *indices])``. The purpose
code is the CRC32 of a short label ("sim1", "bootstrap", ...), so two
purposes never share a stream and a replicate index always maps to the same
draws regardless of which worker runs it.
"""

import zlib

import numpy as np


def purpose_code(label):
    return zlib.crc32(label.encode("utf-8")) & 0xFFFFFFFF


def seed_sequence(seed, purpose, *indices):
    entropy = [int(seed) & 0xFFFFFFFF, purpose_code(purpose)]
    entropy.extend(int(i) for i in indices)
    return np.random.SeedSequence(entropy)


def make_rng(seed, purpose, *indices):
    """Generator for (seed, purpose, indices)"""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, purpose, *indices)))


def derive_seed(seed, purpose, *indices):
    """32-bit integer seed for a child object (e.g. one MC iteration's config)"""
    state = seed_sequence(seed, purpose, *indices).generate_state(1, dtype=np.uint32)
    return int(state[0])
