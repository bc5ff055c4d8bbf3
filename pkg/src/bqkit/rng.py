"""Deterministic named random streams.

Every random draw in the toolkit comes from a stream addressed by
(seed, *names).  Streams are independent of each other and of execution
order, so sweeps can run rows in parallel without changing results.
"""

import hashlib

import numpy as np


def stream(seed: int, *names) -> np.random.Generator:
    """Generator for the stream addressed by ``names`` under ``seed``."""
    h = hashlib.sha256()
    for name in names:
        h.update(str(name).encode("utf-8"))
        h.update(b"\x1f")
    words = [int(w) for w in np.frombuffer(h.digest()[:16], dtype="<u4")]
    ss = np.random.SeedSequence([int(seed)] + words)
    return np.random.Generator(np.random.PCG64(ss))
