"""Named sub-seed derivation.

Every random consumer in the pipeline draws from its own stream, derived by
hashing (root seed, purpose strings). Adding a new consumer therefore never
perturbs the draws of existing ones, and parallel/serial execution orders
cannot change results.
"""

import hashlib

import numpy as np


def subseed(root: int, *purpose) -> int:
    """Derive a 64-bit seed from a root seed and a purpose path.

    The purpose path is a tuple of strings/ints, e.g. ("pretrain", "mask").
    Uses SHA-256 so the derivation is stable across processes and platforms
    (unlike the builtin hash()).
    """
    tag = ":".join(str(p) for p in (root, *purpose))
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(root: int, *purpose) -> np.random.Generator:
    """A fresh PCG64 generator for one named purpose."""
    return np.random.default_rng(subseed(root, *purpose))
