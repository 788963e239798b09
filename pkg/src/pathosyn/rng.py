"""Counter-based, splittable random streams.

Every draw in the package comes from a generator keyed by a tuple such as
``(seed, subject_id, step)``. Keys are hashed into a Philox key, so a stream
depends only on its key and never on batching or evaluation order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_words(parts) -> list[int]:
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, (bool, np.bool_)):
            raise TypeError("boolean RNG key components are ambiguous")
        if isinstance(p, (int, np.integer)):
            token = f"i{int(p)}"
        elif isinstance(p, str):
            token = f"s{p}"
        else:
            raise TypeError(f"unsupported RNG key component {p!r}")
        h.update(token.encode("utf-8"))
        h.update(b"\x00")
    digest = h.digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 32, 4)]


def generator(*key) -> np.random.Generator:
    """Independent generator for ``key`` (ints and strings)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(_key_words(key))))


def normal(shape, *key) -> np.ndarray:
    """Standard normal float64 draw for ``key``."""
    return generator(*key).standard_normal(shape)
