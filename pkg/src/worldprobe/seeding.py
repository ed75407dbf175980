"""Seed derivation: every random stream is keyed by (master seed, component, indices)."""

import zlib

import numpy as np


def component_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def derive_rng(seed: int, component: str, *indices: int) -> np.random.Generator:
    """Return an independent generator for ``component`` at ``indices``.

    The stream depends only on its key, never on the order in which streams are
    requested, so parallel schedules reproduce serial ones.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, component_key(component)]
    entropy.extend(int(i) & 0xFFFFFFFFFFFFFFFF for i in indices)
    return np.random.default_rng(np.random.SeedSequence(entropy))
