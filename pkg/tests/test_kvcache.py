import math

import numpy as np
import pytest

from nsnkv.core import DTYPE, col_means, make_rng, row_norms, sample_standard_normal
from nsnkv.errors import ShapeMismatch
from nsnkv.hadamard import apply_rows, fwht
from nsnkv.kvcache import (
    CacheConfig,
    append,
    flush_chunk_keys,
    flush_chunk_values,
    new_cache,
    snapshot,
)
from nsnkv.nsn import nsn_forward
from nsnkv.verify import (
    check_kvcache_chunking_invariant,
    check_kvcache_monotone_fidelity,
    check_kvcache_prefill_decode_equivalence,
)


def _cfg(cb, residual=64, d=128, **kw):
    return CacheConfig(d=d, bit_mode=cb.bit_mode, residual_size=residual, **kw)


def _stream(seed, total, d=128):
    rng = make_rng(seed)
    return (sample_standard_normal(rng, total, d),
            apply_rows(sample_standard_normal(rng, total, d)))


def test_counting_130_tokens(cb2_small):
    keys, values = _stream(0, 130)
    state = new_cache(_cfg(cb2_small))
    append(state, keys, values, cb2_small, cb2_small)
    assert len(state.key_chunks) == 2 and len(state.value_chunks) == 2
    assert state.n_quantized == 128
    assert state.key_residual.count == 2 and state.value_residual.count == 2
    assert state.total_tokens == 130


def test_exact_chunk_boundary(cb2_small):
    keys, values = _stream(1, 64)
    state = new_cache(_cfg(cb2_small))
    append(state, keys, values, cb2_small, cb2_small)
    assert len(state.key_chunks) == 1
    assert state.key_residual.count == 0


def test_decode_equals_prefill_bitwise(cb2_small):
    keys, values = _stream(2, 128)
    one_shot = new_cache(_cfg(cb2_small))
    append(one_shot, keys, values, cb2_small, cb2_small)
    stepped = new_cache(_cfg(cb2_small))
    for i in range(128):
        append(stepped, keys[i : i + 1], values[i : i + 1], cb2_small, cb2_small)
    assert snapshot(stepped) == snapshot(one_shot)


def test_append_validates_input(cb2_small):
    state = new_cache(_cfg(cb2_small))
    with pytest.raises(ShapeMismatch):
        append(state, np.zeros((2, 128), DTYPE), np.zeros((3, 128), DTYPE),
               cb2_small, cb2_small)
    with pytest.raises(ShapeMismatch):
        append(state, np.zeros((0, 128), DTYPE), np.zeros((0, 128), DTYPE),
               cb2_small, cb2_small)


def test_key_shift_vector_stays_unrotated(cb2_small):
    keys, _ = _stream(3, 64)
    cfg = _cfg(cb2_small, dq_enabled=False)
    qc = flush_chunk_keys(keys, 0, cb2_small, cfg)
    s1 = row_norms(keys) / DTYPE(math.sqrt(128))
    v_n = keys / s1[:, None]
    assert np.abs(qc.o_values() - col_means(v_n)).max() <= 1e-6


def test_value_chunk_never_sees_rotation(cb2_small):
    _, values = _stream(4, 64)
    cfg = _cfg(cb2_small, dq_enabled=False, bypass_vq=True)
    qc = flush_chunk_values(values, cb2_small, cfg)
    out = nsn_forward(values)
    assert np.array_equal(qc.payload(cb2_small), out.v_nsn)
    assert np.array_equal(qc.s2_values(), out.byproducts.s2)


def test_transform_commutes_with_rotation_free_pipeline(cb2_small):
    """Hadamard before or after the chunk transform gives the same output
    (with the shift vector mapped through the same rotation)."""
    x = sample_standard_normal(make_rng(5), 64, 128)
    a = nsn_forward(apply_rows(x))
    b = nsn_forward(x)
    assert np.abs(a.byproducts.s1 - b.byproducts.s1).max() <= 1e-4
    assert np.abs(a.byproducts.s2 - b.byproducts.s2).max() <= 1e-4
    assert np.abs(a.byproducts.o - fwht(b.byproducts.o)).max() <= 1e-4
    assert np.abs(a.v_nsn - apply_rows(b.v_nsn)).max() <= 1e-4


def test_flush_empty_chunk_rejected(cb2_small):
    with pytest.raises(ShapeMismatch):
        flush_chunk_values(np.zeros((0, 128), DTYPE), cb2_small, _cfg(cb2_small))


def test_key_chunk_positions_enter_rotation(cb2_small):
    """The same rows flushed at different start positions quantize differently."""
    keys, _ = _stream(6, 64)
    cfg = _cfg(cb2_small)
    qc0 = flush_chunk_keys(keys, 0, cb2_small, cfg)
    qc64 = flush_chunk_keys(keys, 64, cb2_small, cfg)
    assert not np.array_equal(qc0.indices, qc64.indices)


def test_base_position_offsets_chunks(cb2_small):
    keys, values = _stream(7, 64)
    shifted = new_cache(_cfg(cb2_small), base_position=64)
    append(shifted, keys, values, cb2_small, cb2_small)
    direct = flush_chunk_keys(keys, 64, cb2_small, _cfg(cb2_small))
    assert np.array_equal(shifted.key_chunks[0].indices, direct.indices)


def test_minimal_head_dim_pipeline(cb2_small):
    """d=8: one sub-vector per token, shift group smaller than its group size."""
    cfg = CacheConfig(d=8, bit_mode=cb2_small.bit_mode, residual_size=16)
    rng = make_rng(8)
    keys = sample_standard_normal(rng, 40, 8)
    values = apply_rows(sample_standard_normal(rng, 40, 8))
    state = new_cache(cfg)
    append(state, keys, values, cb2_small, cb2_small)
    assert state.n_quantized == 32 and state.key_residual.count == 8
    qc = state.key_chunks[0]
    assert qc.indices.shape == (16, 1)
    assert qc.o_values().shape == (8,)
    from nsnkv.vq import bit_ledger, deserialize_chunk, serialize_chunk

    blob = serialize_chunk(qc)
    assert serialize_chunk(deserialize_chunk(blob)) == blob
    assert bit_ledger(qc, 16).avg_bits_per_value > 0


def test_outlier_heavy_stream_stays_finite(cb2_small):
    """Scale outliers, shifted means, and giant tokens must not break the
    cache or produce non-finite attention output."""
    from nsnkv.attention import attend_quantized
    from nsnkv.rope import RopeParams, rope
    from nsnkv.verify import make_misaligned_tensor

    rng = make_rng(9)
    keys = make_misaligned_tensor(rng, 192, 128)
    values = apply_rows(make_misaligned_tensor(rng, 192, 128))
    state = new_cache(_cfg(cb2_small))
    append(state, keys, values, cb2_small, cb2_small)
    q = rope(sample_standard_normal(rng, 1, 128)[0], 191, RopeParams(d=128))
    weights, out = attend_quantized(q, state, cb2_small, cb2_small)
    assert np.isfinite(out).all() and np.isfinite(weights).all()
    assert weights.sum() == pytest.approx(1.0, abs=1e-5)


def test_chunking_invariant_registry(ctx):
    assert check_kvcache_chunking_invariant(ctx).passed


def test_prefill_decode_equivalence_registry(ctx):
    res = check_kvcache_prefill_decode_equivalence(ctx, total=256, schedules=10)
    assert res.passed


def test_monotone_fidelity_registry(ctx):
    res = check_kvcache_monotone_fidelity(ctx, trials=12)
    assert res.passed, res.details
