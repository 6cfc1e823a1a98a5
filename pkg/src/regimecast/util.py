"""Small shared helpers: seeded RNG streams and float formatting."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Deterministic child generator for (seed, *keys).

    Keys may be ints or strings; strings are hashed so stream identity does
    not depend on Python's per-process hash randomisation.
    """
    words = [int(seed)]
    for k in keys:
        if isinstance(k, (int, np.integer)):
            words.append(int(k) & 0xFFFFFFFF)
        else:
            digest = hashlib.sha256(str(k).encode("utf-8")).digest()
            words.append(int.from_bytes(digest[:4], "little"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def format_float(x: float) -> str:
    """Shortest round-trip decimal form; used for byte-stable CSV/JSON output."""
    return repr(float(x))
