"""Kernel backend selection.

The compiled extension (built from _native.pyx) is preferred when importable;
otherwise the pure-numpy fallback is used. Both produce bit-identical output.
Set NSNKV_FORCE_PY=1 to force the fallback (used by the parity tests and the
backend benchmark).
"""

from __future__ import annotations

import importlib
import os

import numpy as np

from . import _pyfallback

_native = None
if os.environ.get("NSNKV_FORCE_PY", "0") in ("", "0"):
    try:
        _native = importlib.import_module("._native", __package__)
    except ImportError:
        _native = None

HAVE_NATIVE = _native is not None
BACKEND = "native" if HAVE_NATIVE else "python"

_impl = _native if HAVE_NATIVE else _pyfallback


def fwht_rows(a: np.ndarray) -> np.ndarray:
    return _impl.fwht_rows(a)


def match_block(vecs, entries, inv_norms, fold):
    return _impl.match_block(
        np.ascontiguousarray(vecs, dtype=np.float32),
        np.ascontiguousarray(entries, dtype=np.float32),
        np.ascontiguousarray(inv_norms, dtype=np.float64),
        bool(fold),
    )


def entry_inv_norms(entries: np.ndarray) -> np.ndarray:
    """1/||entry|| in float64, accumulated in component order (both backends
    score with these, so the order is part of the match semantics)."""
    e = np.asarray(entries, dtype=np.float64)
    s = e[:, 0] * e[:, 0]
    for k in range(1, e.shape[1]):
        s = s + e[:, k] * e[:, k]
    return 1.0 / np.sqrt(s)


def backends() -> dict:
    """Available backend modules, for parity tests and benchmarks."""
    out = {"python": _pyfallback}
    if _native is not None:
        out["native"] = _native
    return out
