"""Registry of executable invariant checks.

Every behavioral invariant of the pipeline modules lives here as a named
check returning a CheckResult, so the verify command can run the whole suite
and emit per-check JSON, and the test suite can reuse the same machinery at
larger sample sizes. The registry is intentionally enumerable: tests assert
it stays exhaustive.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import codebook as cbm
from . import stats
from .attention import output_quantized, scores_quantized, softmax_rows
from .codebook import BitMode, Codebook
from .config import RunConfig
from .core import DTYPE, col_means, make_rng, row_norms, sample_standard_normal
from .hadamard import apply_rows
from .kvcache import CacheConfig, append, new_cache, snapshot
from .nsn import NsnByproducts, nsn_forward, nsn_restore
from .rope import RopeParams, rope, rope_rows
from .simulate import _cos
from .vq import (
    ScaleStrategy,
    adjust_scale,
    bit_ledger,
    quantize_chunk,
    rtn4_dequant,
    rtn4_group,
    serialize_chunk,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)


@dataclass
class VerifyContext:
    cb2: Codebook
    cb1: Codebook
    config: RunConfig
    seed: int = 0


def _result(name: str, passed: bool, **details) -> CheckResult:
    clean = {}
    for k, v in details.items():
        if isinstance(v, (np.floating, np.integer)):
            v = v.item()
        clean[k] = v
    return CheckResult(name=name, passed=bool(passed), details=clean)


# ---------------------------------------------------------------------------
# hadamard


def check_hadamard_norm_preservation(ctx, n: int = 10000, d: int = 128) -> CheckResult:
    x = sample_standard_normal(make_rng(ctx.seed + 1), n, d)
    y = apply_rows(x)
    rel = np.abs(row_norms(y).astype(np.float64) - row_norms(x).astype(np.float64))
    rel /= row_norms(x).astype(np.float64)
    worst = float(rel.max())
    return _result("hadamard.norm_preservation", worst <= 1e-5, max_rel_err=worst, n=n, d=d)


def check_hadamard_involution(ctx, n: int = 10000, d: int = 128) -> CheckResult:
    x = sample_standard_normal(make_rng(ctx.seed + 2), n, d)
    y = apply_rows(apply_rows(x))
    worst = float(np.abs(y - x).max() / np.abs(x).max())
    return _result("hadamard.involution", worst <= 1e-5, max_rel_err=worst, n=n, d=d)


def sylvester_matrix(d: int) -> np.ndarray:
    """Explicit orthonormal Hadamard matrix (float64), built by doubling."""
    h = np.ones((1, 1))
    while h.shape[0] < d:
        h = np.block([[h, h], [h, -h]])
    return h / math.sqrt(d)


def check_hadamard_naive_oracle(ctx) -> CheckResult:
    rng = make_rng(ctx.seed + 3)
    worst = 0.0
    for d in (2, 4, 8, 16, 32, 64, 128):
        x = sample_standard_normal(rng, 64, d)
        expect = x.astype(np.float64) @ sylvester_matrix(d).T
        got = apply_rows(x).astype(np.float64)
        worst = max(worst, float(np.abs(got - expect).max()))
    return _result("hadamard.naive_matrix_oracle", worst <= 1e-5, max_abs_err=worst)


def check_hadamard_runtime_scaling(ctx, rows: int = 64, reps: int = 9) -> CheckResult:
    def best_time(d: int) -> float:
        x = sample_standard_normal(make_rng(ctx.seed + 4), rows, d)
        apply_rows(x)  # warm up
        best = float("inf")
        for _ in range(reps):
            t0 = time.perf_counter()
            apply_rows(x)
            best = min(best, time.perf_counter() - t0)
        return best

    t_small = best_time(128)
    t_large = best_time(4096)
    ratio = t_large / t_small
    return _result(
        "hadamard.runtime_scaling", ratio <= 48.0,
        ratio=ratio, t_d128_s=t_small, t_d4096_s=t_large, rows=rows,
    )


# ---------------------------------------------------------------------------
# nsn


def check_nsn_restore_roundtrip(ctx, n_chunks: int = 1000, n: int = 64, d: int = 128) -> CheckResult:
    rng = make_rng(ctx.seed + 5)
    worst = 0.0
    for _ in range(n_chunks):
        chunk = sample_standard_normal(rng, n, d)
        out = nsn_forward(chunk)
        back = nsn_restore(out.v_nsn, out.byproducts)
        worst = max(worst, float(np.abs(back - chunk).max() / np.abs(chunk).max()))
    return _result("nsn.restore_roundtrip", worst <= 1e-5, max_rel_err=worst, chunks=n_chunks)


def check_nsn_row_norm_contract(ctx, n_chunks: int = 200, n: int = 64, d: int = 128) -> CheckResult:
    rng = make_rng(ctx.seed + 6)
    sqrt_d = math.sqrt(d)
    worst = 0.0
    for _ in range(n_chunks):
        out = nsn_forward(sample_standard_normal(rng, n, d))
        dev = np.abs(row_norms(out.v_nsn).astype(np.float64) - sqrt_d) / sqrt_d
        worst = max(worst, float(dev.max()))
    return _result("nsn.row_norm_contract", worst <= 1e-4, max_rel_norm_dev=worst)


def check_nsn_mid_pipeline_centering(ctx, n_chunks: int = 200, n: int = 64, d: int = 128) -> CheckResult:
    rng = make_rng(ctx.seed + 7)
    worst = 0.0
    for _ in range(n_chunks):
        out = nsn_forward(sample_standard_normal(rng, n, d))
        v_ns = out.v_nsn * out.byproducts.s2[:, None]
        worst = max(worst, float(np.abs(col_means(v_ns)).max()))
    return _result("nsn.mid_pipeline_centering", worst <= 1e-5, max_abs_channel_mean=worst)


def check_nsn_output_near_centering(ctx, n: int = 64, d: int = 128, trials: int = 50) -> CheckResult:
    rng = make_rng(ctx.seed + 8)
    worst = 0.0
    for _ in range(trials):
        out = nsn_forward(sample_standard_normal(rng, n, d))
        eps = float((col_means(out.v_nsn).astype(np.float64) ** 2).mean())
        worst = max(worst, eps)
    return _result("nsn.output_near_centering", worst <= 0.01, max_epsilon=worst, trials=trials)


def check_nsn_outlier_suppression(ctx, n: int = 64, d: int = 128) -> CheckResult:
    rng = make_rng(ctx.seed + 9)
    chunk = sample_standard_normal(rng, n, d)
    chunk[0] *= 100.0
    out = nsn_forward(chunk)
    sqrt_d = math.sqrt(d)
    dev = abs(float(row_norms(out.v_nsn)[0]) - sqrt_d) / sqrt_d
    return _result("nsn.outlier_suppression", dev <= 1e-4, outlier_row_norm_dev=dev)


# ---------------------------------------------------------------------------
# codebook


def brute_force_match(cb: Codebook, vecs: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Independent exhaustive argmax used as the match oracle."""
    e = cb.active_entries.astype(np.float64)
    v = vecs.astype(np.float64)
    u = np.abs(v) if cb.bit_mode.folded else v
    scores = (u @ e.T) / np.linalg.norm(e, axis=1)[None, :]
    idx = np.argmax(scores, axis=1)
    signs = None
    if cb.bit_mode.folded:
        signs = ((v < 0).astype(np.uint8) * (1 << np.arange(8, dtype=np.uint8))).sum(axis=1)
    return idx.astype(np.uint8), signs


def check_codebook_match_optimality(ctx, n: int = 10000) -> CheckResult:
    rng = make_rng(ctx.seed + 10)
    vecs = rng.standard_normal((n, 8), dtype=DTYPE)
    mismatches = {}
    for label, cb in (("2b", ctx.cb2), ("1b", ctx.cb1)):
        idx, signs, _ = cbm.match_block(cb, vecs)
        oidx, osigns = brute_force_match(cb, vecs)
        bad = int((idx != oidx).sum())
        if osigns is not None:
            bad += int((signs != osigns).sum())
        mismatches[label] = bad
    ok = all(v == 0 for v in mismatches.values())
    return _result("codebook.match_optimality", ok, n=n, **{f"mismatches_{k}": v for k, v in mismatches.items()})


def check_codebook_fold_negation(ctx, n: int = 2000) -> CheckResult:
    rng = make_rng(ctx.seed + 11)
    vecs = rng.standard_normal((n, 8), dtype=DTYPE)
    idx_p, sg_p, _ = cbm.match_block(ctx.cb2, vecs)
    idx_n, sg_n, _ = cbm.match_block(ctx.cb2, -vecs)
    rp = cbm.lookup_block(ctx.cb2, idx_p, sg_p)
    rn = cbm.lookup_block(ctx.cb2, idx_n, sg_n)
    ok = bool(np.array_equal(idx_p, idx_n) and np.array_equal(rp, -rn))
    return _result("codebook.fold_negation", ok, n=n)


def check_codebook_tuning_monotonicity(
    ctx, kmeans_samples: int = 1 << 14, kmeans_iters: int = 15,
    steps: int = 200, batch: int = 2048, window: int = 10, slack: float = 1e-3,
) -> CheckResult:
    rng = make_rng(ctx.seed + 12)
    cb = cbm.kmeans_init(rng, BitMode.TWO_BIT, n_samples=kmeans_samples, n_iters=kmeans_iters)
    _, report = cbm.finetune(cb, rng, n_samples=batch, n_steps=steps)
    hist = np.asarray(report.batch_cosdist_history)
    ma = np.convolve(hist, np.ones(window) / window, mode="valid")
    worst_rise = float(np.max(ma[1:] - ma[:-1])) if ma.size > 1 else 0.0
    ok = worst_rise <= slack and report.final_mean_cossim >= report.initial_mean_cossim - 1e-6
    return _result(
        "codebook.tuning_monotonicity", ok,
        worst_moving_avg_rise=worst_rise, slack=slack,
        initial=report.initial_mean_cossim, final=report.final_mean_cossim,
    )


def check_codebook_model_agnostic_build(ctx, n_samples: int = 1 << 13, n_iters: int = 10) -> CheckResult:
    blobs = []
    for _ in range(2):
        cb = cbm.kmeans_init(make_rng(ctx.seed + 13), BitMode.TWO_BIT,
                             n_samples=n_samples, n_iters=n_iters, seed=ctx.seed + 13)
        cb, _ = cbm.finetune(cb, make_rng(ctx.seed + 14), n_samples=1024, n_steps=20)
        blobs.append(cbm.serialize(cb))
    ok = blobs[0] == blobs[1]
    return _result("codebook.model_agnostic_build", ok,
                   note="build path consumes only (bit_mode, seed, hyperparameters)")


# ---------------------------------------------------------------------------
# vq


def _random_unit_chunks(rng, n_tokens: int, d: int):
    """Transform-domain rows (norm sqrt(d)) plus reconstructions, in batches."""
    out = nsn_forward(sample_standard_normal(rng, n_tokens, d))
    return apply_rows(out.v_nsn)


def check_vq_strategy3_orthogonality(ctx, n_tokens: int = 10000, d: int = 128) -> CheckResult:
    rng = make_rng(ctx.seed + 15)
    worst_orth = 0.0
    worst_par = 0.0
    done = 0
    while done < n_tokens:
        take = min(2048, n_tokens - done)
        v = _random_unit_chunks(rng, take, d).astype(np.float64)
        idx, sg, _ = cbm.match_block(ctx.cb2, v.astype(DTYPE).reshape(-1, 8))
        recon = cbm.lookup_block(ctx.cb2, idx, sg).reshape(take, d).astype(np.float64)
        dot = (v * recon).sum(axis=1)
        v2 = (v * v).sum(axis=1)
        factor = v2 / dot
        vq_adj = factor[:, None] * recon
        err = vq_adj - v
        num = np.abs((err * v).sum(axis=1))
        den = np.sqrt(v2) * np.linalg.norm(err, axis=1)
        worst_orth = max(worst_orth, float((num / np.maximum(den, 1e-30)).max()))
        par = (v * vq_adj).sum(axis=1) / v2
        worst_par = max(worst_par, float(np.abs(par - 1.0).max()))
        done += take
    ok = worst_orth <= 1e-4 and worst_par <= 1e-5
    return _result(
        "vq.strategy3_orthogonality", ok,
        max_orthogonality_residual=worst_orth, max_parallel_dev=worst_par, tokens=n_tokens,
    )


def check_vq_strategy1_l2_optimality(ctx, n_tokens: int = 500, d: int = 128) -> CheckResult:
    rng = make_rng(ctx.seed + 16)
    v = _random_unit_chunks(rng, n_tokens, d).astype(np.float64)
    idx, sg, _ = cbm.match_block(ctx.cb2, v.astype(DTYPE).reshape(-1, 8))
    recon = cbm.lookup_block(ctx.cb2, idx, sg).reshape(n_tokens, d).astype(np.float64)
    ok = True
    worst = 0.0
    for i in range(n_tokens):
        f1 = adjust_scale(v[i], recon[i], ScaleStrategy.MIN_L2)
        best = np.linalg.norm(f1 * recon[i] - v[i])
        for t in np.linspace(f1 - 1.0, f1 + 1.0, 21):
            diff = float(np.linalg.norm(t * recon[i] - v[i]) - best)
            worst = min(worst, diff)
            if diff < -1e-9:
                ok = False
    return _result("vq.strategy1_l2_optimality", ok, max_violation=abs(worst), tokens=n_tokens)


def check_vq_match_scale_invariance(ctx, n: int = 5000) -> CheckResult:
    rng = make_rng(ctx.seed + 17)
    vecs = rng.standard_normal((n, 8), dtype=DTYPE)
    base_idx, base_sg, _ = cbm.match_block(ctx.cb2, vecs)
    ok = True
    # power-of-two scalings shift float exponents only, so scores scale exactly
    for alpha in (0.25, 0.5, 2.0, 128.0):
        idx, sg, _ = cbm.match_block(ctx.cb2, (vecs * DTYPE(alpha)))
        ok = ok and np.array_equal(idx, base_idx) and np.array_equal(sg, base_sg)
    return _result("vq.match_scale_invariance", ok, n=n)


def check_vq_dq_half_step_bound(ctx, trials: int = 200) -> CheckResult:
    rng = make_rng(ctx.seed + 18)
    worst = -1.0
    ok = True
    for _ in range(trials):
        n = int(rng.integers(1, 128))
        group = int(rng.integers(1, 48))
        vals = (rng.random(n, dtype=np.float64) * 4 - 2).astype(DTYPE)
        packed, scales, zeros = rtn4_group(vals, group)
        back = rtn4_dequant(packed, n, group, scales, zeros)
        g = np.arange(n) // group
        bound = scales.astype(np.float64)[g] / 2 + 1e-6
        err = np.abs(back.astype(np.float64) - vals.astype(np.float64))
        worst = max(worst, float((err - bound).max()))
        ok = ok and bool((err <= bound).all())
    # exactness corners
    const = np.full(33, 0.7, dtype=DTYPE)
    p, s, z = rtn4_group(const, 32)
    ok = ok and bool(np.array_equal(rtn4_dequant(p, 33, 32, s, z), const))
    ramp = np.arange(16, dtype=DTYPE)
    p, s, z = rtn4_group(ramp, 16)
    ok = ok and bool(np.array_equal(rtn4_dequant(p, 16, 16, s, z), ramp))
    return _result("vq.dq_half_step_bound", ok, worst_excess=worst, trials=trials)


def _quantized_chunk(ctx, cb, n=64, d=128, dq=True, strategy=ScaleStrategy.PARALLEL, seed_shift=19):
    rng = make_rng(ctx.seed + seed_shift)
    out = nsn_forward(sample_standard_normal(rng, n, d))
    rows = apply_rows(out.v_nsn)
    return quantize_chunk(rows, out.byproducts, cb, strategy, dq_enabled=dq, residual_size=n)


def check_vq_ledger_serialization_consistency(ctx) -> CheckResult:
    qc = _quantized_chunk(ctx, ctx.cb2)
    ledger = bit_ledger(qc, residual_size=64)
    wire_bits = (len(serialize_chunk(qc)) - 6) * 8  # minus fixed header
    diff = abs(ledger.total_bits - wire_bits)
    return _result("vq.ledger_serialization_consistency", diff <= 1,
                   ledger_bits=ledger.total_bits, wire_bits=wire_bits)


def check_vq_ledger_reference_widths(ctx) -> CheckResult:
    qc2 = _quantized_chunk(ctx, ctx.cb2)
    qc1 = _quantized_chunk(ctx, ctx.cb1)
    qc2_raw = _quantized_chunk(ctx, ctx.cb2, dq=False)
    avg2 = bit_ledger(qc2, 64).avg_bits_per_value
    avg1 = bit_ledger(qc1, 64).avg_bits_per_value
    avg_raw = bit_ledger(qc2_raw, 64).avg_bits_per_value
    ok = abs(avg2 - 2.23) <= 0.03 and abs(avg1 - 1.23) <= 0.03 and abs(avg_raw - 2.5) <= 0.01
    return _result("vq.ledger_reference_widths", ok,
                   avg_bits_2b=avg2, avg_bits_1b=avg1, avg_bits_2b_no_dq=avg_raw)


# ---------------------------------------------------------------------------
# kvcache


def _random_schedule(rng, total: int) -> list[int]:
    sizes = []
    left = total
    while left > 0:
        take = int(rng.integers(1, min(left, 96) + 1))
        sizes.append(take)
        left -= take
    return sizes


def check_kvcache_chunking_invariant(ctx, total: int = 300, schedules: int = 10) -> CheckResult:
    rng = make_rng(ctx.seed + 20)
    cfg = CacheConfig(d=ctx.config.d, bit_mode=ctx.cb2.bit_mode,
                      residual_size=ctx.config.residual_size)
    ok = True
    for _ in range(schedules):
        keys = sample_standard_normal(rng, total, cfg.d)
        values = apply_rows(sample_standard_normal(rng, total, cfg.d))
        state = new_cache(cfg)
        seen = 0
        for size in _random_schedule(rng, total):
            append(state, keys[seen : seen + size], values[seen : seen + size], ctx.cb2, ctx.cb2)
            seen += size
            ok = ok and state.n_quantized == (seen // cfg.residual_size) * cfg.residual_size
            ok = ok and state.key_residual.count == seen % cfg.residual_size
            ok = ok and state.total_tokens == seen
    return _result("kvcache.chunking_invariant", ok, total=total, schedules=schedules)


def check_kvcache_prefill_decode_equivalence(
    ctx, total: int = 512, schedules: int = 50
) -> CheckResult:
    rng = make_rng(ctx.seed + 21)
    cfg = CacheConfig(d=ctx.config.d, bit_mode=ctx.cb2.bit_mode,
                      residual_size=ctx.config.residual_size)
    keys = sample_standard_normal(rng, total, cfg.d)
    values = apply_rows(sample_standard_normal(rng, total, cfg.d))
    reference = new_cache(cfg)
    append(reference, keys, values, ctx.cb2, ctx.cb2)
    ref_snap = snapshot(reference)
    ok = True
    for _ in range(schedules):
        state = new_cache(cfg)
        seen = 0
        for size in _random_schedule(rng, total):
            append(state, keys[seen : seen + size], values[seen : seen + size], ctx.cb2, ctx.cb2)
            seen += size
        ok = ok and snapshot(state) == ref_snap
    return _result("kvcache.prefill_decode_equivalence", ok, total=total, schedules=schedules)


def _probe_fidelity(keys, values, cb, cfg: CacheConfig, rng) -> tuple[float, float]:
    """(score, output) cosine fidelity of one probe query over a fresh cache."""
    state = new_cache(cfg)
    append(state, keys, values, cb, cb)
    q = rng.standard_normal(cfg.d, dtype=DTYPE)
    pos = keys.shape[0] - 1
    params = RopeParams(d=cfg.d, base=cfg.rope_base)
    q_roped = rope(q, pos, params)
    scores = scores_quantized(q_roped, state, cb)
    weights = softmax_rows(scores.astype(np.float64) / math.sqrt(cfg.d))
    out = output_quantized(weights, state, cb)

    k_roped = rope_rows(keys, np.arange(keys.shape[0]), params).astype(np.float64)
    ref_scores = k_roped @ q_roped.astype(np.float64)
    ref_w = softmax_rows(ref_scores / math.sqrt(cfg.d))
    # reference consumes the same transform-domain values, mapped back
    v_model = apply_rows(values).astype(np.float64)
    ref_out = ref_w.astype(np.float64) @ v_model
    return _cos(scores, ref_scores), _cos(out, ref_out)


def _probe_output_cossim(keys, values, cb, cfg: CacheConfig, rng) -> float:
    return _probe_fidelity(keys, values, cb, cfg, rng)[1]


def check_kvcache_monotone_fidelity(ctx, trials: int = 30, total: int = 224) -> CheckResult:
    rng = make_rng(ctx.seed + 22)
    means = {}
    streams = [
        (sample_standard_normal(rng, total, ctx.config.d),
         apply_rows(sample_standard_normal(rng, total, ctx.config.d)))
        for _ in range(trials)
    ]
    for rs in (32, 64, 128):
        cfg = CacheConfig(d=ctx.config.d, bit_mode=ctx.cb1.bit_mode, residual_size=rs)
        vals = [
            _probe_output_cossim(k, v, ctx.cb1, cfg, make_rng(ctx.seed + 1000 + i))
            for i, (k, v) in enumerate(streams)
        ]
        means[rs] = float(np.mean(vals))
    ok = means[128] >= means[32]
    return _result("kvcache.monotone_fidelity", ok,
                   **{f"mean_output_cossim_rs{k}": v for k, v in means.items()},
                   trials=trials)


# ---------------------------------------------------------------------------
# attention


def check_attention_softmax_rows_sum(ctx, n: int = 200) -> CheckResult:
    rng = make_rng(ctx.seed + 23)
    w = softmax_rows(rng.standard_normal((n, 64)) * 5)
    worst = float(np.abs(w.sum(axis=1).astype(np.float64) - 1.0).max())
    ok = worst <= 1e-5 and bool((w >= 0).all())
    return _result("attention.softmax_rows_sum", ok, max_row_sum_dev=worst)


def _bypass_cache(ctx, keys, values, d):
    cfg = CacheConfig(d=d, bit_mode=ctx.cb2.bit_mode,
                      residual_size=ctx.config.residual_size,
                      strategy=ScaleStrategy.NONE, dq_enabled=False, bypass_vq=True)
    state = new_cache(cfg)
    append(state, keys, values, ctx.cb2, ctx.cb2)
    return state, cfg


def check_attention_byproduct_score_identity(
    ctx, total: int = 256, n_queries: int = 8
) -> CheckResult:
    rng = make_rng(ctx.seed + 24)
    d = ctx.config.d
    keys = sample_standard_normal(rng, total, d)
    v_model = sample_standard_normal(rng, total, d)
    state, cfg = _bypass_cache(ctx, keys, apply_rows(v_model), d)
    params = RopeParams(d=d, base=cfg.rope_base)
    worst_score = 0.0
    worst_out = 0.0
    for _ in range(n_queries):
        q = rng.standard_normal(d, dtype=DTYPE)
        pos = total - 1
        q_roped = rope(q, pos, params)
        s_quant = scores_quantized(q_roped, state, ctx.cb2).astype(np.float64)
        k_roped = rope_rows(keys, np.arange(total), params).astype(np.float64)
        s_ref = k_roped @ q_roped.astype(np.float64)
        scale = float(np.abs(s_ref).max())
        worst_score = max(worst_score, float(np.abs(s_quant - s_ref).max()) / scale)

        w = softmax_rows(s_ref / math.sqrt(d))
        out_quant = output_quantized(w, state, ctx.cb2).astype(np.float64)
        out_ref = w.astype(np.float64) @ v_model.astype(np.float64)
        worst_out = max(
            worst_out, float(np.abs(out_quant - out_ref).max()) / float(np.abs(out_ref).max())
        )
    ok = worst_score <= 1e-4 and worst_out <= 1e-4
    return _result("attention.byproduct_score_identity", ok,
                   max_score_rel_err=worst_score, max_output_rel_err=worst_out, tokens=total)


def check_attention_rope_on_shift_correctness(ctx, total: int = 192) -> CheckResult:
    rng = make_rng(ctx.seed + 25)
    d = ctx.config.d
    keys = sample_standard_normal(rng, total, d)
    state, cfg = _bypass_cache(ctx, keys, apply_rows(sample_standard_normal(rng, total, d)), d)
    params = RopeParams(d=d, base=cfg.rope_base)
    q = rng.standard_normal(d, dtype=DTYPE)
    pos = total - 1
    q_roped = rope(q, pos, params)
    s_quant = scores_quantized(q_roped, state, ctx.cb2).astype(np.float64)

    # materialize: restore each key from its stored pieces, rotate whole keys
    mats = []
    r = cfg.residual_size
    for ci, qc in enumerate(state.key_chunks):
        payload = qc.payload(ctx.cb2)
        v_nsn = rope_rows(apply_rows(payload),  # undo Hadamard
                          -(ci * r + np.arange(qc.n_tokens)), params)  # undo rotation
        byp = NsnByproducts(s1=qc.s1_values(), o=qc.o_values(), s2=qc.s2_values())
        restored = nsn_restore(v_nsn, byp)
        mats.append(rope_rows(restored, ci * r + np.arange(qc.n_tokens), params))
    if state.key_residual.count:
        mats.append(rope_rows(state.key_residual.tokens, state.residual_positions, params))
    k_full = np.concatenate(mats).astype(np.float64)
    s_mat = k_full @ q_roped.astype(np.float64)
    rel = float(np.abs(s_quant - s_mat).max()) / float(np.abs(s_mat).max())
    return _result("attention.rope_on_shift_correctness", rel <= 1e-4, max_rel_err=rel)


def check_attention_bitmode_output_monotonicity(ctx, trials: int = 30, total: int = 96) -> CheckResult:
    rng = make_rng(ctx.seed + 26)
    fid = {ctx.cb2.bit_mode: [], ctx.cb1.bit_mode: []}
    for i in range(trials):
        keys = sample_standard_normal(rng, total, ctx.config.d)
        values = apply_rows(sample_standard_normal(rng, total, ctx.config.d))
        for cb in (ctx.cb2, ctx.cb1):
            cfg = CacheConfig(d=ctx.config.d, bit_mode=cb.bit_mode,
                              residual_size=ctx.config.residual_size)
            fid[cb.bit_mode].append(
                _probe_fidelity(keys, values, cb, cfg, make_rng(ctx.seed + 2000 + i))
            )
    s2, o2 = (float(np.mean([f[j] for f in fid[BitMode.TWO_BIT]])) for j in (0, 1))
    s1, o1 = (float(np.mean([f[j] for f in fid[BitMode.ONE_BIT]])) for j in (0, 1))
    return _result("attention.bitmode_output_monotonicity", o2 > o1 and s2 >= s1,
                   mean_output_cossim_2b=o2, mean_output_cossim_1b=o1,
                   mean_score_cossim_2b=s2, mean_score_cossim_1b=s1, trials=trials)


# ---------------------------------------------------------------------------
# stats


def check_stats_kl_nonnegativity(ctx) -> CheckResult:
    rng = make_rng(ctx.seed + 27)
    t = sample_standard_normal(rng, 512, 16)
    t[:, 0] = 3.14  # constant channel must stay finite
    report = stats.channel_kl(t)
    ok = bool(np.isfinite(report.per_channel_kl).all() and (report.per_channel_kl >= 0).all())
    return _result("stats.kl_nonnegativity", ok, mean_kl=report.mean_kl,
                   constant_channel_kl=float(report.per_channel_kl[0]))


def check_stats_brute_force_oracles(ctx, n: int = 64, d: int = 32) -> CheckResult:
    rng = make_rng(ctx.seed + 28)
    t = sample_standard_normal(rng, n, d).astype(np.float64)
    mu = t.mean(axis=0)
    centered = t - mu
    cov = centered.T @ centered / (n - 1)
    frob_sq = 0.0
    for i in range(d):
        for j in range(d):
            if i != j:
                frob_sq += cov[i, j] ** 2
    frob_oracle = math.sqrt(frob_sq)
    frob_err = abs(stats.offdiag_frobenius(t) - frob_oracle)

    group = 8
    std = np.sqrt(np.diag(cov))
    total, count = 0.0, 0
    for g in range(d // group):
        for i in range(g * group, (g + 1) * group):
            for j in range(i + 1, (g + 1) * group):
                total += abs(cov[i, j] / (std[i] * std[j]))
                count += 1
    mac_err = abs(stats.mean_abs_correlation(t, group) - total / count)
    ok = frob_err <= 1e-6 and mac_err <= 1e-6
    return _result("stats.brute_force_oracles", ok, frob_err=frob_err, mac_err=mac_err)


def make_misaligned_tensor(rng, n: int = 4096, d: int = 128) -> np.ndarray:
    """Synthetic input with channel scale outliers, nonzero means, and a few
    outlier tokens; the kind of structure the transform pipeline is meant
    to wash out."""
    scales = np.ones(d, dtype=DTYPE)
    scales[:: d // 8] = 10.0
    means = np.zeros(d, dtype=DTYPE)
    means[:: d // 16] = 2.0
    t = sample_standard_normal(rng, n, d) * scales + means
    outliers = rng.integers(0, n, size=max(1, n // 100))
    t[outliers] *= 50.0
    return t


def check_stats_pipeline_improvement(ctx, n: int = 4096, d: int = 128) -> CheckResult:
    rng = make_rng(ctx.seed + 29)
    t = make_misaligned_tensor(rng, n, d)
    sqrt_d = math.sqrt(d)

    norms = row_norms(t) / DTYPE(sqrt_d)
    v_n = t / np.maximum(norms, 1e-8)[:, None]
    kl_n = stats.channel_kl(apply_rows(v_n)).mean_kl
    full = nsn_forward(t)
    kl_nsn = stats.channel_kl(apply_rows(full.v_nsn)).mean_kl
    oracle = stats.channel_kl(sample_standard_normal(rng, n, d)).mean_kl
    ok = kl_nsn <= kl_n and kl_nsn <= 3 * oracle
    return _result("stats.pipeline_improvement", ok,
                   kl_normalize_only=kl_n, kl_full_transform=kl_nsn, kl_oracle=oracle)


def check_stats_lemma_band_selfconsistency(ctx, n: int = 4096, d: int = 128, trials: int = 30) -> CheckResult:
    rng = make_rng(ctx.seed + 30)
    gauss = sample_standard_normal(rng, n, d)
    res = stats.lemma_band_check(gauss, alpha=0.05, trials=trials, rng=make_rng(ctx.seed + 31))
    ok = res.coverage >= 0.95

    eps = 0.1
    shifted = (sample_standard_normal(rng, n, d) * DTYPE(math.sqrt(1 - eps))
               + DTYPE(math.sqrt(eps)))
    res_eps = stats.lemma_band_check(shifted, alpha=0.05, trials=trials, rng=make_rng(ctx.seed + 32))
    ok = ok and abs(res_eps.mean_variance - (1.0 - res_eps.epsilon)) <= 0.02
    ok = ok and res_eps.band[0] <= res_eps.mean_variance
    return _result("stats.lemma_band_selfconsistency", ok,
                   gaussian_coverage=res.coverage,
                   injected_epsilon=res_eps.epsilon,
                   injected_mean_variance=res_eps.mean_variance,
                   injected_band_low=res_eps.band[0])


# ---------------------------------------------------------------------------
# registry


CHECKS = [
    ("hadamard.norm_preservation", check_hadamard_norm_preservation),
    ("hadamard.involution", check_hadamard_involution),
    ("hadamard.naive_matrix_oracle", check_hadamard_naive_oracle),
    ("hadamard.runtime_scaling", check_hadamard_runtime_scaling),
    ("nsn.restore_roundtrip", check_nsn_restore_roundtrip),
    ("nsn.row_norm_contract", check_nsn_row_norm_contract),
    ("nsn.mid_pipeline_centering", check_nsn_mid_pipeline_centering),
    ("nsn.output_near_centering", check_nsn_output_near_centering),
    ("nsn.outlier_suppression", check_nsn_outlier_suppression),
    ("codebook.match_optimality", check_codebook_match_optimality),
    ("codebook.fold_negation", check_codebook_fold_negation),
    ("codebook.tuning_monotonicity", check_codebook_tuning_monotonicity),
    ("codebook.model_agnostic_build", check_codebook_model_agnostic_build),
    ("vq.strategy3_orthogonality", check_vq_strategy3_orthogonality),
    ("vq.strategy1_l2_optimality", check_vq_strategy1_l2_optimality),
    ("vq.match_scale_invariance", check_vq_match_scale_invariance),
    ("vq.dq_half_step_bound", check_vq_dq_half_step_bound),
    ("vq.ledger_serialization_consistency", check_vq_ledger_serialization_consistency),
    ("vq.ledger_reference_widths", check_vq_ledger_reference_widths),
    ("kvcache.chunking_invariant", check_kvcache_chunking_invariant),
    ("kvcache.prefill_decode_equivalence", check_kvcache_prefill_decode_equivalence),
    ("kvcache.monotone_fidelity", check_kvcache_monotone_fidelity),
    ("attention.softmax_rows_sum", check_attention_softmax_rows_sum),
    ("attention.byproduct_score_identity", check_attention_byproduct_score_identity),
    ("attention.rope_on_shift_correctness", check_attention_rope_on_shift_correctness),
    ("attention.bitmode_output_monotonicity", check_attention_bitmode_output_monotonicity),
    ("stats.kl_nonnegativity", check_stats_kl_nonnegativity),
    ("stats.brute_force_oracles", check_stats_brute_force_oracles),
    ("stats.pipeline_improvement", check_stats_pipeline_improvement),
    ("stats.lemma_band_selfconsistency", check_stats_lemma_band_selfconsistency),
]

CHECK_NAMES = [name for name, _ in CHECKS]


def run_all(ctx: VerifyContext, names: list[str] | None = None) -> list[CheckResult]:
    wanted = set(names) if names is not None else None
    results = []
    for name, fn in CHECKS:
        if wanted is not None and name not in wanted:
            continue
        try:
            results.append(fn(ctx))
        except Exception as e:  # a crashed check is a failed check
            results.append(CheckResult(name=name, passed=False, details={"error": repr(e)}))
    return results
