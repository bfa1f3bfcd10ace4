"""Named deterministic random streams.

Every stochastic site (init, shuffling, dropout, episode resets, ...) draws
from its own counter-based Philox stream, keyed by a root seed plus a path of
names. Streams are independent of each other and of the order in which other
streams are consumed, so adding a new site never perturbs existing ones.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(root_seed, *path) -> np.random.Generator:
    """Return the generator for (root_seed, path). Same arguments, same stream."""
    if not path:
        raise ValueError("stream path must have at least one component")
    tag = "/".join(str(p) for p in path)
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF, *words]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def spawn_seeds(root_seed, *path, count):
    """Derive `count` integer seeds from a named stream (for per-episode rngs)."""
    gen = stream(root_seed, *path)
    return [int(s) for s in gen.integers(0, 2**63 - 1, size=count)]
