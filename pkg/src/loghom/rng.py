"""Counter-based random number streams.

Every stochastic object in the package is drawn from a Philox generator
keyed by (master seed, replica index, stream id).  Philox is counter based,
so replica streams are independent by construction and can be generated in
any order, on any number of workers, without seed bookkeeping.
"""

from __future__ import annotations

import numpy as np

# Stream ids (the third key component).  Keep them stable: they are part of
# the reproducibility contract.
STREAM_FIELD = 0
STREAM_TEST = 7

_MASK64 = (1 << 64) - 1


def philox_key(master_seed: int, replica: int = 0, stream: int = STREAM_FIELD) -> np.ndarray:
    """128-bit Philox key for (master seed, replica, stream)."""
    if not 0 <= stream < (1 << 16):
        raise ValueError(f"stream id out of range: {stream}")
    hi = master_seed & _MASK64
    lo = ((replica << 16) | stream) & _MASK64
    return np.array([hi, lo], dtype=np.uint64)


def generator(master_seed: int, replica: int = 0, stream: int = STREAM_FIELD) -> np.random.Generator:
    """Deterministic generator for one (seed, replica, stream) triple."""
    return np.random.Generator(np.random.Philox(key=philox_key(master_seed, replica, stream)))


def normalize_seed(seed) -> tuple[int, int, int]:
    """Accept an int or a (master, replica[, stream]) tuple."""
    if isinstance(seed, (int, np.integer)):
        return int(seed), 0, STREAM_FIELD
    seed = tuple(int(s) for s in seed)
    if len(seed) == 2:
        return seed[0], seed[1], STREAM_FIELD
    if len(seed) == 3:
        return seed
    raise ValueError(f"seed must be an int or a 2/3-tuple, got {seed!r}")
