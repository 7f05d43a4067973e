"""Pure-numpy implementations of the hot kernels.

Semantics are pinned so the compiled backend can reproduce them bit for bit:
float32 butterflies are elementwise (each output depends on one input pair),
and match scores accumulate in float64 in fixed component order.
"""

from __future__ import annotations

import math

import numpy as np


def fwht_rows(a: np.ndarray) -> np.ndarray:
    """Orthonormal Walsh-Hadamard transform of each row of a (n, d) float32 array.

    d must be a power of two (validated by the caller). Returns a new array;
    scaling by 1/sqrt(d) is applied once at the end. One scratch buffer is
    reused across butterfly passes so no per-pass temporaries are allocated.
    """
    n, d = a.shape
    out = np.array(a, dtype=np.float32, order="C", copy=True)
    scratch = np.empty((n, d // 2), dtype=np.float32)
    h = 1
    while h < d:
        v = out.reshape(n, d // (2 * h), 2, h)
        x = v[:, :, 0, :]
        y = v[:, :, 1, :]
        tmp = scratch.reshape(n, d // (2 * h), h)
        np.copyto(tmp, x)
        np.add(tmp, y, out=x)
        np.subtract(tmp, y, out=y)
        h *= 2
    out *= np.float32(1.0 / math.sqrt(d))
    return out


def match_block(
    vecs: np.ndarray,
    entries: np.ndarray,
    inv_norms: np.ndarray,
    fold: bool,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Cosine-argmax of each 8-dim row of vecs against 256 codebook entries.

    fold=True matches |v| and returns per-row sign bytes (bit k set iff
    component k is negative; zero counts as positive). Scores are float64;
    ties resolve to the lowest entry index. A zero row scores 0 against
    every entry and therefore maps to index 0 with all-positive signs.
    """
    m, sub = vecs.shape
    if fold:
        u = np.abs(vecs).astype(np.float64)
        neg = vecs < 0
        signs = (neg.astype(np.uint8) * (1 << np.arange(sub, dtype=np.uint8))).sum(axis=1).astype(np.uint8)
    else:
        u = vecs.astype(np.float64)
        signs = None
    e = entries.astype(np.float64)
    scores = u[:, 0, None] * e[None, :, 0]
    for k in range(1, sub):
        scores += u[:, k, None] * e[None, :, k]
    scores *= inv_norms[None, :]
    idx = np.argmax(scores, axis=1).astype(np.uint8)
    return idx, signs
