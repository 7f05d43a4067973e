"""Normalize-shift-normalize transform over a chunk of tokens.

Three steps, each leaving a byproduct for exact restoration:

1. normalize: s1 = ||row|| / sqrt(d), rows scaled to norm sqrt(d)
2. shift:     o = per-channel mean, subtracted
3. normalize: s2 = ||row|| / sqrt(d) again

Restoration is v = s1 * (s2 * v_nsn + o). Near-zero row norms are clamped to
keep streaming caches crash-free; clamp events are surfaced as metadata, and
degenerate chunks (e.g. identical rows) restore exactly through o alone.

A channel-wise-scaling replacement for the second normalization was evaluated
and rejected: it cannot suppress outlier tokens (their magnitude, not their
channel profile, is the problem), so only the token-wise form is implemented.
The shift step can optionally use a geometric median instead of the mean
(weiszfeld_shift) for ablations; mean subtraction is the production path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DTYPE, as_tensor2d, col_means, row_norms
from .errors import ShapeMismatch

# Per-token norms below NORM_EPS * sqrt(d) clamp to that floor before division.
NORM_EPS = 1e-8


@dataclass
class NsnByproducts:
    """Per-token scales s1, s2 and the per-channel shift o."""

    s1: np.ndarray
    o: np.ndarray
    s2: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.s1.shape[0]

    @property
    def d(self) -> int:
        return self.o.shape[0]


@dataclass
class NsnOutput:
    v_nsn: np.ndarray
    byproducts: NsnByproducts
    n_clamped: int  # tokens whose s1 or s2 hit the clamp floor


def _scale_per_token(t: np.ndarray, sqrt_d: float) -> tuple[np.ndarray, np.ndarray, int]:
    norms = row_norms(t)
    s = norms / DTYPE(sqrt_d)
    clamped = s < NORM_EPS
    n_clamped = int(clamped.sum())
    if n_clamped:
        s = np.maximum(s, DTYPE(NORM_EPS))
    return t / s[:, None], s, n_clamped


def nsn_forward(chunk: np.ndarray) -> NsnOutput:
    """Apply the three-step transform; every non-clamped output row has norm sqrt(d)."""
    v = as_tensor2d(chunk)
    n, d = v.shape
    if n < 1 or d < 2:
        raise ShapeMismatch(f"need at least 1 token and 2 channels, got {v.shape}")
    sqrt_d = math.sqrt(d)

    v_n, s1, c1 = _scale_per_token(v, sqrt_d)
    o = col_means(v_n)
    v_ns = v_n - o
    v_nsn, s2, c2 = _scale_per_token(v_ns, sqrt_d)

    return NsnOutput(
        v_nsn=v_nsn,
        byproducts=NsnByproducts(s1=s1, o=o, s2=s2),
        n_clamped=c1 + c2,
    )


def nsn_restore(v_nsn: np.ndarray, b: NsnByproducts) -> np.ndarray:
    """Invert the transform: s1 * (s2 * v_nsn + o) with per-token/per-channel broadcast."""
    v = as_tensor2d(v_nsn)
    n, d = v.shape
    if b.s1.shape != (n,) or b.s2.shape != (n,) or b.o.shape != (d,):
        raise ShapeMismatch(
            f"byproducts (s1:{b.s1.shape}, o:{b.o.shape}, s2:{b.s2.shape}) "
            f"do not fit tensor {v.shape}"
        )
    return b.s1[:, None] * (b.s2[:, None] * v + b.o[None, :])


@dataclass
class WeiszfeldResult:
    shift: np.ndarray
    converged: bool
    n_iters: int


def weiszfeld_shift(chunk_n: np.ndarray, max_iters: int = 100, tol: float = 1e-7) -> WeiszfeldResult:
    """Geometric median of the rows, for the shift-step ablation.

    Standard iteratively reweighted averaging starting from the mean, which
    only ever decreases the summed distance F(o). An iterate landing on a
    data point is nudged by 1e-7 along the first axis. Non-convergence is
    reported in the result, never raised.
    """
    t = as_tensor2d(chunk_n).astype(np.float64)
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    o = t.mean(axis=0)
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        diff = t - o
        dist = np.sqrt((diff * diff).sum(axis=1))
        if np.any(dist < 1e-12):
            o = o.copy()
            o[0] += 1e-7
            continue
        w = 1.0 / dist
        new_o = (w[:, None] * t).sum(axis=0) / w.sum()
        step = float(np.linalg.norm(new_o - o))
        o = new_o
        if step < tol:
            converged = True
            break
    return WeiszfeldResult(shift=o.astype(DTYPE), converged=converged, n_iters=iters)
