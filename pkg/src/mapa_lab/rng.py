"""Deterministic random streams derived from a 64-bit master seed.

Streams are addressed by a path of ints and/or short strings, e.g.
``make_rng(seed, "train", restart, epoch)``. Identical (seed, path)
always yields an identical draw sequence, across runs and platforms;
distinct paths give statistically independent streams.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _encode(part):
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK64
    if isinstance(part, str):
        digest = hashlib.blake2b(part.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"stream path parts must be int or str, got {type(part).__name__}")


def make_rng(seed, *path):
    """A numpy Generator for the stream addressed by (seed, *path)."""
    entropy = [_encode(seed)] + [_encode(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))
