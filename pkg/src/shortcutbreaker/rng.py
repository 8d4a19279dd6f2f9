"""Counter-based random streams.

Every stochastic operation takes a ``numpy.random.Generator`` backed by
Philox-4x64 (a counter-based generator). Streams are keyed by a seed and
a path of integers, e.g. ``(seed, "train", step)``, hashed through
``SeedSequence`` so that any stream can be rebuilt independently and
results replay across machines and across serial/parallel execution.
"""

from __future__ import annotations

import zlib

import numpy as np

_DEFAULT_SEED = 0


def _as_word(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFFFFFFFFFF


def make_rng(seed: int, *path) -> np.random.Generator:
    """Return an independent Philox stream for ``(seed, *path)``."""
    words = [_as_word(seed)] + [_as_word(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def spawn_seed(seed: int, *path) -> int:
    """Derive a 63-bit child seed from ``(seed, *path)``."""
    return int(make_rng(seed, *path).integers(0, 2**63 - 1))
