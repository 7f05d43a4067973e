import numpy as np
import pytest

from nsnkv import codebook as cbm
from nsnkv.codebook import BitMode, Codebook
from nsnkv.core import DTYPE, make_rng
from nsnkv.errors import FormatError, IndexOutOfRange, ZeroVector
from nsnkv.verify import brute_force_match


def _crafted_codebook(bit_mode=BitMode.TWO_BIT, seed=11):
    rng = make_rng(seed)
    entries = rng.standard_normal((256, 8)).astype(DTYPE)
    if bit_mode is BitMode.TWO_BIT:
        entries = np.abs(entries) + DTYPE(0.05)
    return Codebook(entries=entries, bit_mode=bit_mode, seed=seed)


def test_invariants_enforced():
    with pytest.raises(ValueError):
        Codebook(entries=np.ones((128, 8), DTYPE), bit_mode=BitMode.ONE_BIT, seed=0)
    bad = np.abs(make_rng(0).standard_normal((256, 8))).astype(DTYPE) + DTYPE(0.05)
    bad[3] = -1.0
    with pytest.raises(ValueError):
        Codebook(entries=bad, bit_mode=BitMode.TWO_BIT, seed=0)
    zeroed = np.abs(make_rng(1).standard_normal((256, 8))).astype(DTYPE) + DTYPE(0.05)
    zeroed[7] = 0.0
    with pytest.raises(ValueError):
        Codebook(entries=zeroed, bit_mode=BitMode.TWO_BIT, seed=0)


def test_kmeans_exact_fit_when_k_equals_n():
    cb = cbm.kmeans_init(make_rng(3), BitMode.ONE_BIT, n_samples=256, n_iters=10)
    data = cbm._training_view(make_rng(3).standard_normal((256, 8), dtype=DTYPE), BitMode.ONE_BIT)
    # every sample should sit on some centroid
    d2 = ((data[:, None, :].astype(np.float64) - cb.entries[None].astype(np.float64)) ** 2).sum(-1)
    assert float(d2.min(axis=1).max()) <= 1e-10


def test_kmeans_two_bit_nonnegative():
    cb = cbm.kmeans_init(make_rng(4), BitMode.TWO_BIT, n_samples=4096, n_iters=5)
    assert (cb.entries >= 0).all()
    assert not cb.tuned


def test_finetune_lr_zero_is_identity(cb2_small):
    tuned, report = cbm.finetune(cb2_small, make_rng(5), n_samples=512, n_steps=10, lr=0.0)
    assert np.array_equal(tuned.entries, cb2_small.entries)
    assert report.final_mean_cossim == pytest.approx(report.initial_mean_cossim, abs=1e-9)


class _DirectionalRng:
    """Stub generator: every draw is a positive multiple of one direction."""

    def __init__(self, direction):
        self.direction = np.asarray(direction, dtype=np.float64)
        self.rng = make_rng(123)

    def standard_normal(self, shape, dtype=np.float64):
        n = shape[0]
        scales = np.abs(self.rng.standard_normal(n)) + 0.1
        out = scales[:, None] * self.direction[None, :]
        return out.astype(dtype)


def test_finetune_single_direction_converges():
    cb = _crafted_codebook(BitMode.TWO_BIT)
    direction = np.abs(make_rng(9).standard_normal(8)) + 0.2
    tuned, report = cbm.finetune(cb, _DirectionalRng(direction), n_samples=256,
                                 n_steps=400, lr=0.3)
    assert report.final_mean_cossim >= 1.0 - 1e-3


def test_finetune_improves_heldout_smallscale(cb2_small):
    before = cbm.heldout_cossim(cb2_small)
    tuned, _ = cbm.finetune(cb2_small, make_rng(6), n_samples=2048, n_steps=200, lr=0.2)
    after = cbm.heldout_cossim(tuned)
    assert after > before


def test_match_scale_invariant_to_entry_scaling():
    cb = _crafted_codebook()
    k = 37
    idx, signs = cbm.match(cb, cb.entries[k] * 3.0)
    assert idx == k and signs == 0


def test_match_negated_entry_gets_full_sign_byte():
    cb = _crafted_codebook()  # strictly positive entries
    idx, signs = cbm.match(cb, -cb.entries[90])
    assert idx == 90 and signs == 0xFF


def test_match_zero_vector_raises():
    cb = _crafted_codebook()
    with pytest.raises(ZeroVector):
        cbm.match(cb, np.zeros(8, DTYPE))


def test_match_block_substitutes_zero_rows():
    cb = _crafted_codebook()
    vecs = make_rng(8).standard_normal((4, 8)).astype(DTYPE)
    vecs[2] = 0.0
    idx, signs, zero_mask = cbm.match_block(cb, vecs)
    assert zero_mask.tolist() == [False, False, True, False]
    assert idx[2] == 0 and signs[2] == 0


def test_match_agrees_with_brute_force(cb2, cb1):
    vecs = make_rng(10).standard_normal((3000, 8)).astype(DTYPE)
    for cb in (cb2, cb1):
        idx, signs, _ = cbm.match_block(cb, vecs)
        oidx, osigns = brute_force_match(cb, vecs)
        assert np.array_equal(idx, oidx)
        if osigns is not None:
            assert np.array_equal(signs, osigns)


def test_lookup_is_argmax_of_cosine():
    cb = _crafted_codebook(BitMode.ONE_BIT)
    v = make_rng(12).standard_normal(8).astype(DTYPE)
    idx, _ = cbm.match(cb, v)
    recon = cbm.lookup(cb, idx).astype(np.float64)
    v64 = v.astype(np.float64)
    e = cb.entries.astype(np.float64)
    cos_all = (e @ v64) / (np.linalg.norm(e, axis=1) * np.linalg.norm(v64))
    got = float(v64 @ recon / (np.linalg.norm(v64) * np.linalg.norm(recon)))
    assert got == pytest.approx(cos_all.max(), abs=1e-12)
    assert idx == int(np.argmax(cos_all))


def test_lookup_all_plus_signs_returns_raw_entry():
    cb = _crafted_codebook()
    assert np.array_equal(cbm.lookup(cb, 12, 0), cb.entries[12])
    assert np.array_equal(cbm.lookup(cb, 12), cb.entries[12])


def test_lookup_index_out_of_range():
    cb = _crafted_codebook()
    with pytest.raises(IndexOutOfRange):
        cbm.lookup(cb, 256)
    with pytest.raises(IndexOutOfRange):
        cbm.lookup_block(cb, np.array([0, 300]))


def test_fold_negation_property(cb2):
    vecs = make_rng(12).standard_normal((500, 8)).astype(DTYPE)
    ip, sp, _ = cbm.match_block(cb2, vecs)
    im, sm, _ = cbm.match_block(cb2, -vecs)
    assert np.array_equal(ip, im)
    assert np.array_equal(cbm.lookup_block(cb2, ip, sp), -cbm.lookup_block(cb2, im, sm))


def test_pack4_bound_and_lookup_switch():
    cb = _crafted_codebook()
    packed = cbm.pack4(cb)
    err = np.abs(packed.active_entries - cb.entries).max()
    assert err <= packed.packed4.scale / 2 + 1e-6
    assert packed.packed4 is not None and cb.packed4 is None


def test_pack4_constant_entries_exact():
    entries = np.full((256, 8), 0.75, DTYPE)
    for mode in (BitMode.TWO_BIT, BitMode.ONE_BIT):
        cb = Codebook(entries=entries, bit_mode=mode, seed=0)
        packed = cbm.pack4(cb)
        assert np.array_equal(packed.active_entries, entries)


def test_pack4_one_bit_preserves_signs():
    cb = _crafted_codebook(BitMode.ONE_BIT)
    packed = cbm.pack4(cb)
    big = np.abs(cb.entries) > packed.packed4.scale  # comfortably away from zero
    assert np.array_equal(np.sign(packed.active_entries[big]), np.sign(cb.entries[big]))


def test_serialize_roundtrip_bit_exact(cb2_small):
    blob = cbm.serialize(cb2_small)
    back = cbm.deserialize(blob)
    assert np.array_equal(back.entries, cb2_small.entries)
    assert back.bit_mode == cb2_small.bit_mode
    assert back.seed == cb2_small.seed and back.tuned == cb2_small.tuned
    assert cbm.serialize(back) == blob


def test_serialize_roundtrip_with_pack4():
    cb = cbm.pack4(_crafted_codebook())
    back = cbm.deserialize(cbm.serialize(cb))
    assert np.array_equal(back.packed4.levels, cb.packed4.levels)
    assert back.packed4.scale == cb.packed4.scale
    assert np.array_equal(back.active_entries, cb.active_entries)


def test_deserialize_rejects_junk():
    cb = _crafted_codebook()
    blob = cbm.serialize(cb)
    with pytest.raises(FormatError):
        cbm.deserialize(b"JUNK" + blob[4:])
    with pytest.raises(FormatError):
        cbm.deserialize(blob[:100])
    with pytest.raises(FormatError):
        cbm.deserialize(blob + b"\x00")
    bad_version = blob[:4] + b"\xff\xff" + blob[6:]
    with pytest.raises(FormatError):
        cbm.deserialize(bad_version)


def test_build_depends_only_on_seed_and_hyperparameters():
    blobs = []
    for _ in range(2):
        rng = make_rng(77)
        cb = cbm.kmeans_init(rng, BitMode.ONE_BIT, n_samples=4096, n_iters=8, seed=77)
        cb, _ = cbm.finetune(cb, rng, n_samples=512, n_steps=25)
        blobs.append(cbm.serialize(cb))
    assert blobs[0] == blobs[1]
