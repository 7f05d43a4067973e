"""Desk-scale prefill + decode simulation against a full-precision reference.

Each head runs an independent token stream through both paths: the quantized
cache (with its residual policy) and an exact attention oracle. Per-query
score and output fidelity land in step records; clamp/fallback counters and
the bit ledger summarize the run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import output_quantized, scores_quantized, softmax_rows
from .codebook import Codebook
from .config import RunConfig
from .core import DTYPE, as_tensor2d
from .hadamard import apply_rows
from .kvcache import append, new_cache
from .rope import RopeParams, rope, rope_rows
from .vq import bit_ledger

CSV_FIELDS = [
    "head", "phase", "step", "position",
    "score_cossim", "score_l2", "output_cossim", "output_l2",
]


@dataclass(frozen=True)
class Workload:
    n_prefill: int = 128
    n_decode: int = 32
    n_heads: int = 1
    seed: int = 0


@dataclass
class StepRecord:
    head: int
    phase: str  # "probe" or "decode"
    step: int
    position: int
    score_cossim: float
    score_l2: float
    output_cossim: float
    output_l2: float

    def row(self) -> list:
        return [self.head, self.phase, self.step, self.position,
                self.score_cossim, self.score_l2, self.output_cossim, self.output_l2]


def _head_rng(seed: int, head: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(head,))))


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 and ny == 0.0:
        return 1.0
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(x @ y / (nx * ny))


def _rel_l2(a: np.ndarray, b: np.ndarray) -> float:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(y)
    if denom == 0.0:
        return float(np.linalg.norm(x - y))
    return float(np.linalg.norm(x - y) / denom)


def _eval_query(q_raw, position, keys, values, state, cb_k, cb_v, params,
                fp_keys=None, fp_values=None) -> tuple:
    """Compare both attention paths for one query over tokens [0, position].

    With a full-precision prefill segment (fp_keys/fp_values), its scores are
    exact and only the tokens behind the cache go through the quantized path.
    """
    q_roped = rope(q_raw, position, params)
    s_cache = scores_quantized(q_roped, state, cb_k)
    if fp_keys is not None and fp_keys.shape[0]:
        fp_roped = rope_rows(fp_keys, np.arange(fp_keys.shape[0]), params)
        s_quant = np.concatenate([fp_roped @ q_roped, s_cache])
    else:
        s_quant = s_cache
    k_roped = rope_rows(keys, np.arange(keys.shape[0]), params).astype(np.float64)
    s_ref = k_roped @ q_roped.astype(np.float64)
    w_quant = softmax_rows(s_quant.astype(np.float64) / math.sqrt(params.d))
    n_fp = 0 if fp_keys is None else fp_keys.shape[0]
    out_quant = output_quantized(w_quant[n_fp:], state, cb_v)
    if n_fp:
        out_quant = out_quant + w_quant[:n_fp] @ fp_values
    w_ref = softmax_rows(s_ref / math.sqrt(params.d))
    out_ref = w_ref.astype(np.float64) @ values.astype(np.float64)
    return (
        _cos(s_quant, s_ref), _rel_l2(s_quant, s_ref),
        _cos(out_quant, out_ref), _rel_l2(out_quant, out_ref),
    )


def run_head(
    config: RunConfig,
    cb_k: Codebook,
    cb_v: Codebook,
    head: int,
    workload: Workload,
    keys: np.ndarray | None = None,
    values: np.ndarray | None = None,
    queries: np.ndarray | None = None,
) -> tuple[list[StepRecord], dict]:
    """One head's simulation. With tensors supplied, the trailing len(queries)
    tokens are treated as decode steps; otherwise tokens are drawn i.i.d."""
    rng = _head_rng(workload.seed, head)
    d = config.d
    params = RopeParams(d=d, base=config.rope_base)

    if keys is None:
        total = workload.n_prefill + workload.n_decode
        keys = rng.standard_normal((total, d), dtype=DTYPE)
        values = rng.standard_normal((total, d), dtype=DTYPE)
        queries = rng.standard_normal((max(workload.n_decode, 1), d), dtype=DTYPE)
        n_decode = workload.n_decode
    else:
        keys = as_tensor2d(keys, cols=d)
        values = as_tensor2d(values, cols=d)
        queries = as_tensor2d(queries, cols=d)
        n_decode = queries.shape[0]
        if n_decode > keys.shape[0]:
            raise ValueError("more queries than tokens")
    if keys.shape[0] < 1:
        raise ValueError("workload needs at least one token")
    n_prefill = keys.shape[0] - n_decode

    fp_keys = fp_values = None
    if config.prefill_fp and n_prefill > 0:
        fp_keys = keys[:n_prefill]
        fp_values = values[:n_prefill]
        state = new_cache(config.cache_config(), base_position=n_prefill)
    else:
        state = new_cache(config.cache_config())
        if n_prefill > 0:
            append(state, keys[:n_prefill], apply_rows(values[:n_prefill]), cb_k, cb_v)

    records = []
    if n_decode == 0:
        pos = n_prefill - 1
        probe_q = queries[0] if queries.shape[0] else rng.standard_normal(d, dtype=DTYPE)
        metrics = _eval_query(probe_q, pos, keys[:n_prefill], values[:n_prefill],
                              state, cb_k, cb_v, params, fp_keys, fp_values)
        records.append(StepRecord(head, "probe", 0, pos, *metrics))
    for t in range(n_decode):
        pos = n_prefill + t
        append(state, keys[pos : pos + 1], apply_rows(values[pos : pos + 1]), cb_k, cb_v)
        metrics = _eval_query(queries[t], pos, keys[: pos + 1], values[: pos + 1],
                              state, cb_k, cb_v, params, fp_keys, fp_values)
        records.append(StepRecord(head, "decode", t, pos, *metrics))

    ledgers = [bit_ledger(qc, config.residual_size)
               for qc in state.key_chunks + state.value_chunks]
    summary = {
        "head": head,
        "tokens": int(state.total_tokens),
        "quantized_tokens": int(state.n_quantized),
        "clamp_count": state.clamp_count,
        "zero_vector_count": state.zero_vector_count,
        "s3_fallback_count": state.s3_fallback_count,
        "avg_bits_per_value": (
            float(np.mean([l.avg_bits_per_value for l in ledgers])) if ledgers else None
        ),
        "mean_score_cossim": float(np.mean([r.score_cossim for r in records])),
        "mean_output_cossim": float(np.mean([r.output_cossim for r in records])),
    }
    return records, summary


def run_simulation(
    config: RunConfig,
    workload: Workload,
    cb_k: Codebook,
    cb_v: Codebook,
    tensors: tuple | None = None,
) -> tuple[list[StepRecord], dict]:
    """All heads; with a (Q, K, V) tensor triple only head 0 runs."""
    all_records = []
    head_summaries = []
    if tensors is not None:
        q, k, v = tensors
        records, summary = run_head(config, cb_k, cb_v, 0, workload, k, v, q)
        all_records.extend(records)
        head_summaries.append(summary)
    else:
        for head in range(workload.n_heads):
            records, summary = run_head(config, cb_k, cb_v, head, workload)
            all_records.extend(records)
            head_summaries.append(summary)
    summary = {
        "config": config.to_dict(),
        "heads": head_summaries,
        "mean_score_cossim": float(np.mean([s["mean_score_cossim"] for s in head_summaries])),
        "mean_output_cossim": float(np.mean([s["mean_output_cossim"] for s in head_summaries])),
        "avg_bits_per_value": head_summaries[0]["avg_bits_per_value"],
        "clamp_count": int(sum(s["clamp_count"] for s in head_summaries)),
        "zero_vector_count": int(sum(s["zero_vector_count"] for s in head_summaries)),
        "s3_fallback_count": int(sum(s["s3_fallback_count"] for s in head_summaries)),
    }
    return all_records, summary


def write_csv(path, records: list[StepRecord]) -> None:
    with open(path, "w") as f:
        f.write(",".join(CSV_FIELDS) + "\n")
        for r in records:
            f.write(",".join(str(x) for x in r.row()) + "\n")
