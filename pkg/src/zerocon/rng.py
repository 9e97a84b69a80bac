"""Counter-based seed splitting.

All randomness in a run derives from one integer seed. A stream for a given
purpose (and optional step counter) is ``SeedSequence([seed, crc32(purpose), step])``,
so streams never depend on the order in which they are requested.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch


def derive_seed(seed: int, purpose: str, step: int = 0) -> int:
    """A 63-bit integer seed for ``(seed, purpose, step)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(purpose.encode()), int(step)])
    lo, hi = (int(w) for w in ss.generate_state(2, dtype=np.uint32))
    return (lo | (hi << 32)) >> 1


def numpy_rng(seed: int, purpose: str, step: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, purpose, step))


def torch_generator(seed: int, purpose: str, step: int = 0) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, purpose, step))
    return g
