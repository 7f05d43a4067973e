import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsnkv.core import make_rng, row_norms, sample_standard_normal
from nsnkv.errors import NonPowerOfTwoDim, ShapeMismatch
from nsnkv.hadamard import SignVector, apply_rows, fwht, rht, sign_vector
from nsnkv.verify import sylvester_matrix


def test_constant_vector_maps_to_first_axis():
    out = fwht(np.array([1, 1, 1, 1], np.float32))
    assert np.allclose(out, [2, 0, 0, 0])


def test_involution_d128():
    x = sample_standard_normal(make_rng(0), 1, 128)[0]
    back = fwht(fwht(x))
    assert np.abs(back - x).max() <= 1e-5 * np.abs(x).max()


def test_non_power_of_two_rejected():
    with pytest.raises(NonPowerOfTwoDim):
        fwht(np.ones(3, np.float32))
    with pytest.raises(NonPowerOfTwoDim):
        fwht(np.ones(1, np.float32))


def test_rht_all_plus_equals_plain():
    sv = SignVector(signs=np.ones(16, np.float32), seed=0)
    x = sample_standard_normal(make_rng(2), 1, 16)[0]
    assert np.array_equal(rht(x, sv), fwht(x))


def test_rht_inverse_roundtrip():
    sv = sign_vector(5, 64)
    x = sample_standard_normal(make_rng(3), 1, 64)[0]
    y = rht(x, sv)
    back = sv.signs * fwht(y)  # inverse: undo transform, then undo signs
    assert np.abs(back - x).max() <= 1e-5 * np.abs(x).max()


def test_rht_norm_preserving():
    sv = sign_vector(6, 128)
    x = sample_standard_normal(make_rng(4), 1, 128)[0]
    nx = float(np.linalg.norm(x.astype(np.float64)))
    ny = float(np.linalg.norm(rht(x, sv).astype(np.float64)))
    assert abs(nx - ny) <= 1e-5 * nx


def test_sign_vector_deterministic_and_binary():
    a = sign_vector(9, 32)
    b = sign_vector(9, 32)
    assert np.array_equal(a.signs, b.signs)
    assert set(np.unique(a.signs)) <= {-1.0, 1.0}


def test_apply_rows_single():
    out = apply_rows(np.array([[1, 1, 1, 1]], np.float32))
    assert np.allclose(out, [[2, 0, 0, 0]])


def test_apply_rows_empty():
    out = apply_rows(np.zeros((0, 8), np.float32))
    assert out.shape == (0, 8)


def test_apply_rows_preserves_isotropy():
    t = sample_standard_normal(make_rng(5), 1000, 128)
    var = apply_rows(t).astype(np.float64).var(axis=0)
    assert var.min() >= 0.8 and var.max() <= 1.2


def test_apply_rows_requires_sign_vector():
    with pytest.raises(ValueError):
        apply_rows(np.ones((2, 4), np.float32), randomized=True)
    with pytest.raises(ShapeMismatch):
        apply_rows(np.ones((2, 4), np.float32), randomized=True, sv=sign_vector(0, 8))


def test_matches_explicit_sylvester_product():
    rng = make_rng(6)
    for d in (2, 4, 8, 16, 32, 64, 128):
        x = sample_standard_normal(rng, 16, d)
        expect = x.astype(np.float64) @ sylvester_matrix(d).T
        assert np.abs(apply_rows(x).astype(np.float64) - expect).max() <= 1e-5


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 4, 8, 16, 64, 256]))
def test_norm_preservation_property(seed, d):
    x = sample_standard_normal(make_rng(seed), 4, d)
    nx = row_norms(x).astype(np.float64)
    ny = row_norms(apply_rows(x)).astype(np.float64)
    assert np.all(np.abs(ny - nx) <= 1e-5 * np.maximum(nx, 1e-6))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 8, 32, 128]))
def test_involution_property(seed, d):
    x = sample_standard_normal(make_rng(seed), 3, d)
    back = apply_rows(apply_rows(x))
    assert np.abs(back - x).max() <= 1e-5 * max(np.abs(x).max(), 1e-6)
