"""Keyed random streams.

Every random draw in the package comes from a generator keyed by a master
seed, a purpose tag and integer coordinates (tree, node, candidate, column...).
Streams with different keys are statistically independent, so the order in
which they are created never changes the values they produce.
"""

import numpy as np

_PURPOSES = {
    "noise": 1,
    "coef": 2,
    "ldp": 3,
    "attack": 4,
    "data": 5,
    "split": 6,
    "mc": 7,
    "trial": 8,
}


def stream(seed: int, purpose: str, *key: int) -> np.random.Generator:
    """Returns the generator for `(seed, purpose, *key)`.

    Args:
        seed: Master seed, a non-negative integer.
        purpose: One of the registered purpose tags.
        *key: Non-negative integer coordinates identifying the stream.

    Returns:
        A fresh `np.random.Generator` over PCG64.
    """
    if purpose not in _PURPOSES:
        raise ValueError(f"unknown stream purpose {purpose!r}")
    words = [int(seed), _PURPOSES[purpose], *(int(k) for k in key)]
    if any(w < 0 for w in words):
        raise ValueError("stream keys must be non-negative")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
