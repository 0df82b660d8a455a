"""Seed derivation: every random stream descends from one master seed."""

from __future__ import annotations

import hashlib

import numpy as np


def _word(label) -> int:
    if isinstance(label, (int, np.integer)) and 0 <= int(label) <= 0xFFFFFFFF:
        return int(label)
    digest = hashlib.sha256(str(label).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def derive_seed(master: int, *labels) -> int:
    """A 63-bit seed that depends only on ``master`` and the label path."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, *(_word(x) for x in labels)])
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))


def rng_for(master: int, *labels) -> np.random.Generator:
    """Counter-style generator keyed by a label path (order of use is irrelevant)."""
    return np.random.Generator(np.random.Philox(derive_seed(master, *labels)))
