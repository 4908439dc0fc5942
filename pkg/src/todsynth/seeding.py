"""Counter-based seed splitting: one global seed fans out to independent streams."""

import zlib

import numpy as np


def _key(k):
    if isinstance(k, str):
        return zlib.crc32(k.encode())
    return int(k)


def derive_seed(seed, *keys):
    """A 63-bit seed determined by ``seed`` and the path of ``keys`` (ints or strings)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


def rng_for(seed, *keys):
    return np.random.default_rng(derive_seed(seed, *keys))
