"""Repeat-factor sampling and per-sample seed derivation."""
from __future__ import annotations

import hashlib
import math

import numpy as np

from ..errors import DomainError


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts, independent of call order."""
    digest = hashlib.sha256("/".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def category_repeat_factors(category_freq: dict[int, int], num_images: int, freq_threshold: float) -> dict[int, float]:
    if not 0 < freq_threshold <= 1:
        raise DomainError("frequency threshold must lie in (0, 1]")
    return {c: max(1.0, math.sqrt(freq_threshold / (n / num_images))) for c, n in category_freq.items() if n}


def repeat_factors(index, freq_threshold: float = 0.001) -> list[float]:
    """Per-image factor: the largest factor among the categories it contains (1 if none)."""
    cat_r = category_repeat_factors(index.category_freq, len(index.samples), freq_threshold)
    return [max((cat_r[i.category_id] for i in s.instances), default=1.0) for s in index.samples]


def epoch_indices(factors, rng: np.random.Generator) -> list[int]:
    """Each image appears floor(r) times plus once more with probability frac(r)."""
    r = np.asarray(factors, dtype=np.float64)
    whole = np.floor(r)
    reps = whole + (rng.random(len(r)) < (r - whole))
    return np.repeat(np.arange(len(r)), reps.astype(np.int64)).tolist()
