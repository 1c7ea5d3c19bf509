"""Deterministic seeded randomness.

Every stochastic operation in the package draws from a Philox
(counter-based) generator keyed by a root seed plus a tuple of string/int
labels, so independent pipeline stages get independent, reproducible
streams and nothing touches ambient entropy.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, *labels: object) -> int:
    """64-bit key from a root seed and a label path, via SHA-256."""
    payload = repr((int(seed),) + tuple(labels)).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *labels: object) -> np.random.Generator:
    """Philox generator for the (seed, labels) substream."""
    return np.random.Generator(np.random.Philox(derive_key(seed, *labels)))
