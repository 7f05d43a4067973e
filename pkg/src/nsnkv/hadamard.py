"""Orthonormal fast Walsh-Hadamard transform and its randomized variant.

The transform is H_d x / sqrt(d) with H_d the Sylvester construction, so it
is its own inverse. Only power-of-two dimensions are supported; the
randomized variant flips signs with a seeded +/-1 vector before transforming.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import DTYPE, make_rng
from .errors import NonPowerOfTwoDim, ShapeMismatch


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_dim(d: int) -> None:
    if d < 2 or not is_power_of_two(d):
        raise NonPowerOfTwoDim(f"transform size must be a power of two >= 2, got {d}")


@dataclass(frozen=True)
class SignVector:
    """Deterministic +/-1 vector of length d derived from a seed."""

    signs: np.ndarray
    seed: int

    def __post_init__(self):
        s = np.asarray(self.signs, dtype=DTYPE)
        if not np.all(np.abs(s) == 1.0):
            raise ValueError("sign vector entries must be +1 or -1")
        object.__setattr__(self, "signs", s)


def sign_vector(seed: int, d: int) -> SignVector:
    rng = make_rng(seed)
    signs = (rng.integers(0, 2, size=d) * 2 - 1).astype(DTYPE)
    return SignVector(signs=signs, seed=seed)


def fwht(row: np.ndarray) -> np.ndarray:
    """Orthonormal Hadamard transform of a single vector."""
    x = np.ascontiguousarray(row, dtype=DTYPE)
    if x.ndim != 1:
        raise ShapeMismatch("fwht expects a 1-D vector")
    _check_dim(x.shape[0])
    return kernels.fwht_rows(x.reshape(1, -1))[0]


def rht(row: np.ndarray, sv: SignVector) -> np.ndarray:
    """Randomized Hadamard transform: fwht(signs * row)."""
    x = np.ascontiguousarray(row, dtype=DTYPE)
    if x.shape != sv.signs.shape:
        raise ShapeMismatch("sign vector length does not match row")
    return fwht(sv.signs * x)


def apply_rows(
    t: np.ndarray,
    randomized: bool = False,
    sv: SignVector | None = None,
) -> np.ndarray:
    """Transform each row of a (tokens, d) tensor independently."""
    a = np.ascontiguousarray(t, dtype=DTYPE)
    if a.ndim != 2:
        raise ShapeMismatch("apply_rows expects a 2-D tensor")
    _check_dim(a.shape[1])
    if a.shape[0] == 0:
        return a.copy()
    if randomized:
        if sv is None:
            raise ValueError("randomized transform needs a SignVector")
        if sv.signs.shape[0] != a.shape[1]:
            raise ShapeMismatch("sign vector length does not match tensor columns")
        a = a * sv.signs
    return kernels.fwht_rows(a)
