"""Reproducible per-(replication, subject) random streams.

Derivation: ``SeedSequence(entropy=master, spawn_key=(rep, subject))`` is
hashed into a 128-bit Philox key; the Philox counter starts at zero. Every
``(master, rep, subject)`` triple therefore owns a disjoint counter-based
stream, and a dataset does not depend on the order in which subjects or
replications are generated.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def seed_stream(master: int, rep: int = 0, subject: int = 0) -> np.random.Generator:
    if master < 0 or rep < 0 or subject < 0:
        raise ValueError("seeds and indices must be non-negative")
    ss = np.random.SeedSequence(entropy=int(master) & MASK64, spawn_key=(int(rep), int(subject)))
    key = ss.generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
