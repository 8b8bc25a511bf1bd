"""Seeded, domain-separated random streams.

Every consumer asks for ``stream(seed, "purpose")``. The purpose string is
hashed into the spawn key of a ``SeedSequence`` that drives a counter-based
Philox generator, so streams for different purposes never overlap and do not
depend on the order in which they are created.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _purpose_key(purpose: str) -> tuple[int, ...]:
    digest = hashlib.sha256(purpose.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


def stream(seed: int, purpose: str) -> np.random.Generator:
    seq = np.random.SeedSequence(int(seed), spawn_key=_purpose_key(purpose))
    return np.random.Generator(np.random.Philox(seq))
