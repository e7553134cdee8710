"""Labeled random sub-streams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, label: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``label`` (e.g. "data", "init", "pools")."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(label.encode()), *extra]))


def substream_seed(seed: int, label: str, *extra: int) -> int:
    return int(stream(seed, label, *extra).integers(0, 2**63 - 1))
