import numpy as np
import pytest

from nsnkv.core import DTYPE, make_rng, sample_standard_normal
from nsnkv.errors import ShapeMismatch
from nsnkv.stats import (
    channel_kl,
    lemma_band_check,
    mean_abs_correlation,
    offdiag_frobenius,
)
from nsnkv.verify import (
    check_stats_brute_force_oracles,
    check_stats_lemma_band_selfconsistency,
    check_stats_pipeline_improvement,
)


def test_kl_oracle_level():
    rep = channel_kl(sample_standard_normal(make_rng(0), 4096, 32), 64)
    assert 0.005 <= rep.mean_kl <= 0.02


def test_kl_constant_channel_finite():
    t = sample_standard_normal(make_rng(1), 500, 4)
    t[:, 2] = 1.0
    rep = channel_kl(t)
    assert np.isfinite(rep.per_channel_kl).all()
    assert rep.per_channel_kl[2] > 1.0  # badly misaligned but finite


def test_kl_never_negative():
    t = sample_standard_normal(make_rng(2), 300, 8) * 3 + 1
    rep = channel_kl(t)
    assert (rep.per_channel_kl >= 0).all()


def test_kl_input_validation():
    with pytest.raises(ValueError):
        channel_kl(sample_standard_normal(make_rng(3), 50, 4))
    with pytest.raises(ValueError):
        channel_kl(sample_standard_normal(make_rng(3), 200, 4), n_bins=4)


def test_kl_report_embeds_parameters():
    rep = channel_kl(sample_standard_normal(make_rng(4), 256, 4))
    d = rep.to_dict()
    assert d["n_bins"] == 64 and d["n_samples"] == 256
    assert d["bin_range"] == [-5.0, 5.0] and d["tail_bins"] == 2


def test_offdiag_frobenius_independent_channels_small():
    t = sample_standard_normal(make_rng(5), 20000, 8)
    assert offdiag_frobenius(t) < 0.1


def test_offdiag_frobenius_duplicated_pair():
    base = sample_standard_normal(make_rng(6), 50000, 1)
    t = np.concatenate([base, base], axis=1)
    assert offdiag_frobenius(t) == pytest.approx(np.sqrt(2), abs=0.05)


def test_offdiag_frobenius_needs_rows():
    with pytest.raises(ShapeMismatch):
        offdiag_frobenius(np.ones((1, 4), DTYPE))


def test_mac_independent_channels():
    t = sample_standard_normal(make_rng(7), 30000, 16)
    assert mean_abs_correlation(t, 8) < 0.02


def test_mac_perfectly_correlated_group():
    base = sample_standard_normal(make_rng(8), 5000, 1)
    t = np.tile(base, (1, 8))
    assert mean_abs_correlation(t, 8) == pytest.approx(1.0, abs=1e-6)


def test_mac_group_must_divide():
    with pytest.raises(ShapeMismatch):
        mean_abs_correlation(sample_standard_normal(make_rng(9), 100, 12), 8)


def test_brute_force_oracles_registry(ctx):
    assert check_stats_brute_force_oracles(ctx).passed


def test_pipeline_improvement_registry(ctx):
    res = check_stats_pipeline_improvement(ctx)
    assert res.passed, res.details


def test_lemma_band_gaussian_coverage():
    t = sample_standard_normal(make_rng(10), 4096, 128)
    res = lemma_band_check(t, alpha=0.05, trials=20, rng=make_rng(11))
    assert res.coverage >= 0.95
    assert res.epsilon < 1e-3 and res.gamma < 3.0


def test_lemma_band_epsilon_injection(ctx):
    res = check_stats_lemma_band_selfconsistency(ctx, trials=20)
    assert res.passed, res.details


def test_lemma_conditions_improve_after_transform():
    """The transform drives the nearly-centered condition toward zero even
    when the input has strongly shifted channels."""
    from nsnkv.nsn import nsn_forward
    from nsnkv.verify import make_misaligned_tensor

    raw = make_misaligned_tensor(make_rng(20), 2048, 128)
    res_raw = lemma_band_check(raw, trials=5, rng=make_rng(21))
    res_nsn = lemma_band_check(nsn_forward(raw).v_nsn, trials=5, rng=make_rng(22))
    assert res_nsn.epsilon < 0.01
    assert res_nsn.epsilon < res_raw.epsilon / 10


def test_lemma_band_correlated_input_widens_spread():
    """Strong inter-channel correlation (large off-diagonal covariance) makes
    per-channel variances after randomized transforms spread much wider."""
    rng = make_rng(15)
    d, n = 64, 2048
    iid = sample_standard_normal(rng, n, d)
    shared = sample_standard_normal(rng, n, 1)
    correlated = (0.9 * shared + 0.45 * sample_standard_normal(rng, n, d)).astype(np.float32)
    res_iid = lemma_band_check(iid, trials=15, rng=make_rng(16))
    res_cor = lemma_band_check(correlated, trials=15, rng=make_rng(17))
    assert res_cor.gamma > 5 * res_iid.gamma
    assert res_cor.variance_samples.std() > 2 * res_iid.variance_samples.std()


def test_lemma_band_requires_rng():
    with pytest.raises(ValueError):
        lemma_band_check(sample_standard_normal(make_rng(12), 100, 8))


def test_lemma_report_embeds_parameters():
    t = sample_standard_normal(make_rng(13), 512, 16)
    res = lemma_band_check(t, alpha=0.1, trials=5, rng=make_rng(14))
    d = res.to_dict()
    assert d["alpha"] == 0.1 and d["trials"] == 5 and "hw_constant" in d
