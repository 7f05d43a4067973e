"""Attention over the mixed quantized + residual cache, plus an exact reference.

Quantized key scores use the byproduct decomposition: with k restored as
s1 * (s2 * v_nsn + o) and rotation commuting per token,

    q . k = s1 * s2 * (HT(q) . v_Q) + s1 * (q . rotate(o, position)),

so the stored payload is consumed in the Hadamard domain and the shift vector
is rotated on the fly at each key position. Residual tokens score exactly.
Value output is accumulated in the Hadamard domain and transformed back once
at the end. Both paths share the same 1/sqrt(d) softmax temperature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .codebook import Codebook
from .core import DTYPE, as_tensor2d
from .errors import ShapeMismatch
from .hadamard import fwht
from .kvcache import KvCacheState
from .rope import RopeParams, rope, rope_expand, rope_rows

__all__ = [
    "AttentionResult",
    "RopeParams",
    "rope",
    "reference_attention",
    "scores_quantized",
    "output_quantized",
    "attend_quantized",
    "softmax_rows",
]


@dataclass
class AttentionResult:
    weights: np.ndarray  # (l_q, l_k), rows sum to 1
    output: np.ndarray   # (l_q, d)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return (e / e.sum(axis=-1, keepdims=True)).astype(DTYPE)


def reference_attention(
    q_all: np.ndarray,
    k_all: np.ndarray,
    v_all: np.ndarray,
    params: RopeParams,
    q_positions: np.ndarray | None = None,
    k_positions: np.ndarray | None = None,
) -> AttentionResult:
    """Full-precision oracle: softmax(rotate(q) . rotate(K)^T / sqrt(d)) . V.

    Queries and keys arrive pre-rotation; positions default to 0..l-1.
    Computation runs in float64.
    """
    q = as_tensor2d(q_all, cols=params.d)
    k = as_tensor2d(k_all, cols=params.d)
    v = as_tensor2d(v_all, cols=params.d)
    if k.shape[0] != v.shape[0]:
        raise ShapeMismatch("keys and values must have the same token count")
    if q_positions is None:
        q_positions = np.arange(q.shape[0])
    if k_positions is None:
        k_positions = np.arange(k.shape[0])
    qr = rope_rows(q, q_positions, params).astype(np.float64)
    kr = rope_rows(k, k_positions, params).astype(np.float64)
    scores = qr @ kr.T / math.sqrt(params.d)
    weights = softmax_rows(scores)
    output = (weights.astype(np.float64) @ v.astype(np.float64)).astype(DTYPE)
    return AttentionResult(weights=weights, output=output)


def scores_quantized(q_roped: np.ndarray, state: KvCacheState, cb_k: Codebook) -> np.ndarray:
    """Raw q.K^T over every cached token, quantized part first then residual.

    q_roped is the query already rotated at its own position.
    """
    q = np.ascontiguousarray(q_roped, dtype=DTYPE).reshape(-1)
    d = state.config.d
    if q.shape[0] != d:
        raise ShapeMismatch(f"query has dim {q.shape[0]}, cache has {d}")
    params = RopeParams(d=d, base=state.config.rope_base)
    q_had = fwht(q)
    r = state.config.residual_size
    parts = []
    for ci, qc in enumerate(state.key_chunks):
        payload = qc.payload(cb_k)
        s1 = qc.s1_values()
        s2 = qc.s2_values()
        o = qc.o_values()
        positions = state.base_position + ci * r + np.arange(qc.n_tokens)
        payload_dot = payload @ q_had
        shift_dot = rope_expand(o, positions, params) @ q
        parts.append(s1 * (s2 * payload_dot + shift_dot))
    res = state.key_residual.tokens
    if res.shape[0]:
        rotated = rope_rows(res, state.residual_positions, params)
        parts.append(rotated @ q)
    if not parts:
        return np.zeros(0, dtype=DTYPE)
    return np.concatenate(parts).astype(DTYPE)


def output_quantized(weights: np.ndarray, state: KvCacheState, cb_v: Codebook) -> np.ndarray:
    """Weighted sum over cached values, inverse-transformed to the model basis."""
    w = np.asarray(weights, dtype=DTYPE).reshape(-1)
    if w.shape[0] != state.total_tokens:
        raise ShapeMismatch(
            f"{w.shape[0]} weights for {state.total_tokens} cached tokens"
        )
    d = state.config.d
    acc = np.zeros(d, dtype=DTYPE)
    r = state.config.residual_size
    for ci, qc in enumerate(state.value_chunks):
        rows = qc.s1_values()[:, None] * (
            qc.s2_values()[:, None] * qc.payload(cb_v) + qc.o_values()[None, :]
        )
        acc += w[ci * r : ci * r + qc.n_tokens] @ rows
    res = state.value_residual.tokens
    if res.shape[0]:
        acc += w[state.n_quantized :] @ res
    # cached values live in the Hadamard domain; one involution returns them
    return fwht(acc)


def attend_quantized(
    q_roped: np.ndarray, state: KvCacheState, cb_k: Codebook, cb_v: Codebook
) -> tuple[np.ndarray, np.ndarray]:
    """Scores -> softmax(1/sqrt(d)) -> output for one query over the cache."""
    scores = scores_quantized(q_roped, state, cb_k)
    weights = softmax_rows(scores.astype(np.float64) / math.sqrt(state.config.d))
    return weights, output_quantized(weights, state, cb_v)
