"""Sub-seed derivation so every component draws from an independent stream."""

import hashlib

import numpy as np


def derive_seed(seed: int, *labels) -> int:
    """Derive a 32-bit sub-seed from the global seed and a label path.

    The result fits numpy and scikit-learn ``random_state`` arguments.
    """
    key = ":".join([str(int(seed))] + [str(label) for label in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def rng_for(seed: int, *labels) -> np.random.Generator:
    """Seeded numpy generator for a labeled component."""
    return np.random.default_rng(derive_seed(seed, *labels))
