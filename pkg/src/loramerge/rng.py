"""Counter-based random streams keyed by (seed, tags).

Every stochastic component in the library draws from a Philox stream whose
key is derived from the run seed plus a tuple of identifying tags (task id,
layer id, step index, ...). Streams are independent of evaluation order, so
parallel or reordered execution cannot change results.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, *tags) -> np.random.Generator:
    """Return a Generator whose state depends only on (seed, *tags)."""
    digest = hashlib.blake2b(repr((int(seed),) + tags).encode(), digest_size=16).digest()
    key = np.frombuffer(digest, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
