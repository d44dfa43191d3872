"""Seeded random streams.

Every random draw in the package comes from a Philox (counter-based) generator
keyed by one 64-bit seed plus a tuple of integer/str stream labels, so a run is
reproducible on any platform without touching global RNG state.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def _label_to_int(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    digest = hashlib.sha256(str(label).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``(seed, *labels)``."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    entropy = [seed & 0xFFFFFFFF, seed >> 32] + [_label_to_int(x) for x in labels]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def normal(gen: np.random.Generator, shape, std: float = 1.0) -> torch.Tensor:
    x = gen.standard_normal(size=tuple(shape), dtype=np.float32)
    if std != 1.0:
        x *= np.float32(std)
    return torch.from_numpy(x)
