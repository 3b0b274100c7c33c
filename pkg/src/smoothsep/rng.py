"""Named, splittable random streams on a counter-based generator.

Every source of randomness in the package (data synthesis, parameter
init, augmentation, adversarial noise, feature subsampling) draws from
its own stream derived from ``(seed, *names)``.  Streams are mutually
independent, so skipping one consumer (e.g. a training variant that
never generates adversarial noise) cannot perturb the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *names) -> int:
    """Derive a 128-bit Philox key from a seed and a path of names."""
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for name in names:
        h.update(b"/")
        h.update(str(name).encode())
    return int.from_bytes(h.digest(), "little")


def stream(seed: int, *names) -> np.random.Generator:
    """A generator whose draws depend only on (seed, *names)."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *names)))
