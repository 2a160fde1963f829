"""Seed-derivation helpers.

All randomness in the package flows through numpy's PCG64 generator.  Streams
are derived from (seed, purpose-tag, index...) so that adding parallelism or
reordering work never changes the draws a given consumer sees.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_to_int(key: int | str) -> int:
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    return int(key) & _MASK64


def substream(seed: int, *keys: int | str) -> np.random.Generator:
    """Deterministic generator for (seed, *keys); stable across platforms."""
    entropy = [int(seed) & _MASK64] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
