"""Seed derivation.

Every random stream in the package is derived from one top-level integer seed
plus a tuple of integer keys naming the stream, e.g. ``(seed, STREAM_TRAIN,
epoch)`` or ``(seed, STREAM_SAMPLE, item, hypothesis)``. Derivation goes
through :class:`numpy.random.SeedSequence`, so streams with different keys are
statistically independent and the mapping is stable across platforms.
"""

from __future__ import annotations

import numpy as np
import torch

STREAM_INIT = 0
STREAM_TRAIN = 1
STREAM_SAMPLE = 2
STREAM_SYNTH = 3
STREAM_EVAL = 4


def derive_seed(seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(int(k) for k in keys)])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(hi) << 31 | int(lo) >> 1


def numpy_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *(int(k) for k in keys)]))


def torch_generator(seed: int, *keys: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *keys))
    return g
