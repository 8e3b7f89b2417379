"""Deterministic RNG streams keyed by (seed, purpose, indices).

Every random draw in the package flows through make_rng so that independent
stages (data, masking, decoding per sample) get independent, reproducible
streams and no stage's draw count affects another's.
"""

import zlib

import numpy as np


def _as_int(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"rng key parts must be int or str, got {type(part)!r}")


def make_rng(*parts):
    entropy = [_as_int(p) for p in parts]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
