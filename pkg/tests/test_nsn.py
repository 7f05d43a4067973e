import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsnkv.core import col_means, make_rng, row_norms, sample_standard_normal
from nsnkv.errors import ShapeMismatch
from nsnkv.nsn import nsn_forward, nsn_restore, weiszfeld_shift
from nsnkv.vq import Rtn4Data


def test_identical_rows_degenerate_to_shift_only():
    chunk = np.tile(np.array([[1.0, -2.0, 0.5, 3.0]], np.float32), (8, 1))
    out = nsn_forward(chunk)
    assert out.n_clamped == 8  # every s2 clamped
    assert np.allclose(out.v_nsn, 0.0)
    assert np.abs(nsn_restore(out.v_nsn, out.byproducts) - chunk).max() <= 1e-6


def test_single_token_centers_to_zero():
    chunk = np.array([[3.0, 4.0]], np.float32)
    out = nsn_forward(chunk)
    assert out.byproducts.s1[0] == pytest.approx(5.0 / math.sqrt(2.0), rel=1e-6)
    assert np.allclose(out.byproducts.o, chunk[0] * math.sqrt(2.0) / 5.0, rtol=1e-6)
    assert np.allclose(out.v_nsn, 0.0)
    assert out.n_clamped == 1
    assert np.abs(nsn_restore(out.v_nsn, out.byproducts) - chunk).max() <= 1e-6


def test_mid_pipeline_channel_means_vanish():
    out = nsn_forward(sample_standard_normal(make_rng(0), 64, 128))
    v_ns = out.v_nsn * out.byproducts.s2[:, None]
    assert np.abs(col_means(v_ns)).max() <= 1e-5


def test_output_rows_have_unit_scaled_norm():
    out = nsn_forward(sample_standard_normal(make_rng(1), 64, 128))
    sqrt_d = math.sqrt(128)
    assert np.abs(row_norms(out.v_nsn) - sqrt_d).max() <= 1e-4 * sqrt_d


def test_roundtrip_random_chunks():
    rng = make_rng(2)
    for _ in range(20):
        chunk = sample_standard_normal(rng, 64, 128)
        out = nsn_forward(chunk)
        back = nsn_restore(out.v_nsn, out.byproducts)
        assert np.abs(back - chunk).max() <= 1e-5 * np.abs(chunk).max()


def test_outlier_token_does_not_dominate():
    chunk = sample_standard_normal(make_rng(3), 64, 128)
    chunk[5] *= 100.0
    out = nsn_forward(chunk)
    sqrt_d = math.sqrt(128)
    assert abs(float(row_norms(out.v_nsn)[5]) - sqrt_d) <= 1e-4 * sqrt_d


def test_restore_shape_mismatch():
    out = nsn_forward(sample_standard_normal(make_rng(4), 8, 16))
    with pytest.raises(ShapeMismatch):
        nsn_restore(out.v_nsn[:, :8], out.byproducts)


def test_forward_rejects_empty():
    with pytest.raises(ShapeMismatch):
        nsn_forward(np.zeros((0, 8), np.float32))


def test_restoration_error_bounded_after_double_quantization():
    """Propagate the stored-parameter bound through s1*(s2*v + o)."""
    rng = make_rng(5)
    chunk = sample_standard_normal(rng, 64, 128)
    out = nsn_forward(chunk)
    b = out.byproducts

    s1_q = Rtn4Data.quantize(b.s1, 64)
    o_q = Rtn4Data.quantize(b.o, 32)
    s1_hat = s1_q.dequant().astype(np.float64)
    o_hat = o_q.dequant().astype(np.float64)
    s2_hat = b.s2.astype(np.float16).astype(np.float64)

    v = out.v_nsn.astype(np.float64)
    approx = s1_hat[:, None] * (s2_hat[:, None] * v + o_hat[None, :])
    exact = nsn_restore(out.v_nsn, b).astype(np.float64)

    d_s1 = np.abs(s1_hat - b.s1.astype(np.float64))
    d_s2 = np.abs(s2_hat - b.s2.astype(np.float64))
    d_o = np.abs(o_hat - b.o.astype(np.float64))
    inner = np.abs(b.s2.astype(np.float64)[:, None] * v + b.o.astype(np.float64)[None, :])
    bound = (
        d_s1[:, None] * inner
        + s1_hat[:, None] * (d_s2[:, None] * np.abs(v) + d_o[None, :])
    )
    assert np.all(np.abs(approx - exact) <= bound + 1e-5)


def test_weiszfeld_two_points():
    pts = np.array([[0.0, 0.0], [2.0, 0.0]], np.float32)
    res = weiszfeld_shift(pts, max_iters=50, tol=1e-7)
    mid = pts.mean(axis=0).astype(np.float64)
    f = lambda o: float(np.linalg.norm(pts.astype(np.float64) - o, axis=1).sum())
    assert f(res.shift.astype(np.float64)) <= f(mid) + 1e-7


def test_weiszfeld_simplex_centroid():
    pts = np.eye(4, dtype=np.float32)  # regular simplex vertices
    res = weiszfeld_shift(pts, max_iters=100, tol=1e-7)
    assert np.abs(res.shift - 0.25).max() <= 1e-5
    assert res.converged


def test_weiszfeld_never_worse_than_mean():
    pts = sample_standard_normal(make_rng(6), 64, 8)
    res = weiszfeld_shift(pts, max_iters=200, tol=1e-9)
    p64 = pts.astype(np.float64)
    f = lambda o: float(np.linalg.norm(p64 - o, axis=1).sum())
    assert f(res.shift.astype(np.float64)) <= f(p64.mean(axis=0)) + 1e-6


def test_weiszfeld_nonconvergence_is_metadata():
    pts = sample_standard_normal(make_rng(7), 32, 4)
    res = weiszfeld_shift(pts, max_iters=1, tol=1e-12)
    assert res.n_iters == 1 and not res.converged


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 40), st.sampled_from([2, 8, 32, 128]))
def test_roundtrip_property(seed, n, d):
    chunk = sample_standard_normal(make_rng(seed), n, d)
    out = nsn_forward(chunk)
    back = nsn_restore(out.v_nsn, out.byproducts)
    assert np.abs(back - chunk).max() <= 1e-5 * max(np.abs(chunk).max(), 1e-3)
