"""Rotary position embedding: per-position rotation of channel pairs.

Channel pair (2j, 2j+1) rotates by angle position * base**(-2j/d). Angles
are evaluated in float64 before the float32 rotation, so positions stay
accurate at long range.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import DTYPE
from .errors import ShapeMismatch


@dataclass(frozen=True)
class RopeParams:
    d: int
    base: float = 10000.0

    def __post_init__(self):
        if self.d % 2:
            raise ShapeMismatch("rotary embedding needs an even dimension")


@lru_cache(maxsize=32)
def _pair_freqs(d: int, base: float) -> np.ndarray:
    j = np.arange(d // 2, dtype=np.float64)
    return float(base) ** (-2.0 * j / d)


def rope_rows(t: np.ndarray, positions: np.ndarray, p: RopeParams) -> np.ndarray:
    """Rotate each row of t at its own position."""
    a = np.ascontiguousarray(t, dtype=DTYPE)
    if a.ndim != 2 or a.shape[1] != p.d:
        raise ShapeMismatch(f"expected (n, {p.d}) rows, got {a.shape}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    if pos.shape[0] != a.shape[0]:
        raise ShapeMismatch("one position per row required")
    theta = pos[:, None] * _pair_freqs(p.d, p.base)[None, :]
    c = np.cos(theta).astype(DTYPE)
    s = np.sin(theta).astype(DTYPE)
    even = a[:, 0::2]
    odd = a[:, 1::2]
    out = np.empty_like(a)
    out[:, 0::2] = even * c - odd * s
    out[:, 1::2] = even * s + odd * c
    return out


def rope(x: np.ndarray, position: float, p: RopeParams) -> np.ndarray:
    """Rotate a single vector."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    if x.ndim != 1:
        raise ShapeMismatch("rope expects a 1-D vector")
    return rope_rows(x[None, :], np.asarray([position]), p)[0]


def rope_expand(x: np.ndarray, positions: np.ndarray, p: RopeParams) -> np.ndarray:
    """One vector rotated to many positions (used for the per-chunk shift
    vector at score time; never materialized beyond the chunk length)."""
    x = np.ascontiguousarray(x, dtype=DTYPE)
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    return rope_rows(np.broadcast_to(x, (pos.shape[0], x.shape[0])), pos, p)
