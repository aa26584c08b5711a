import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ctsynth.config import ConfigError
from ctsynth.data import CTImage, ShapeError
from ctsynth.metrics import (
    RandomConvExtractor,
    dice_sen_spec,
    embed,
    fid,
    fold_report,
    get_extractor,
    mse,
    psnr,
    rmse,
    ssim,
)
from oracles import dice_sen_spec_loop, psnr_loop, rmse_loop, ssim_loop, t_interval


def random_pairs(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        a = rng.random((size, size))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.3), a.shape), 0, 1)
        yield a, b


def test_psnr_rmse_match_loops():
    for a, b in random_pairs(50):
        assert psnr(a, b) == pytest.approx(psnr_loop(a, b), abs=1e-9)
        assert rmse(a, b) == pytest.approx(rmse_loop(a, b), abs=1e-9)


def test_ssim_matches_loop():
    for a, b in random_pairs(10, seed=1):
        assert ssim(a, b) == pytest.approx(ssim_loop(a, b), abs=1e-6)


def test_dice_sen_spec_match_loop():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p = rng.random((32, 32)) < rng.uniform(0, 0.5)
        t = rng.random((32, 32)) < rng.uniform(0, 0.5)
        assert dice_sen_spec(p, t) == pytest.approx(dice_sen_spec_loop(p, t), abs=1e-6)


def test_dice_handcrafted():
    # 16 pixels: TP=2, FP=1, FN=1, TN=12
    p = np.zeros(16, bool)
    t = np.zeros(16, bool)
    p[[0, 1, 2]] = True
    t[[0, 1, 3]] = True
    d, se, sp = dice_sen_spec(p.reshape(4, 4), t.reshape(4, 4))
    assert d == pytest.approx(4 / 6)
    assert se == pytest.approx(2 / 3)
    assert sp == pytest.approx(12 / 13)


def test_empty_masks_convention():
    z = np.zeros((8, 8), bool)
    assert dice_sen_spec(z, z) == (1.0, 1.0, 1.0)
    one = z.copy()
    one[0, 0] = True
    d, se, _ = dice_sen_spec(one, z)
    assert d == 0.0 and se == 0.0


def test_psnr_identical_is_cap_and_masked_empty():
    a = np.random.default_rng(0).random((16, 16))
    assert psnr(a, a) == 100.0
    assert mse(a, a + 0.1, mask=np.zeros_like(a, bool)) == 0.0


def test_psnr_known_value():
    a = np.zeros((4, 4))
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


def test_size_mismatch_raises():
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_constant_images():
    assert ssim(np.zeros((32, 32)), np.ones((32, 32))) < 0.01
    a = np.random.default_rng(3).random((32, 32))
    assert ssim(a, a) == pytest.approx(1.0)


def test_ctimage_accepted():
    a = np.random.default_rng(4).random((16, 16))
    assert psnr(CTImage(a), CTImage(a * 0.5)) == pytest.approx(psnr(a.astype(np.float32), (a * 0.5).astype(np.float32)))


unit_images = arrays(np.float64, (16, 16), elements=st.floats(0, 1, allow_nan=False))


@given(unit_images, unit_images)
def test_psnr_rmse_relation(a, b):
    r = rmse(a, b)
    if r > 0:
        assert psnr(a, b) == pytest.approx(min(100.0, -20 * math.log10(r)), abs=1e-9)


@given(unit_images, unit_images)
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 - 1e-9 <= s <= 1.0 + 1e-9


@given(arrays(bool, (8, 8)), arrays(bool, (8, 8)))
def test_dice_bounds_and_symmetry(p, t):
    d, se, sp = dice_sen_spec(p, t)
    assert 0 <= d <= 1 and 0 <= se <= 1 and 0 <= sp <= 1
    assert d == dice_sen_spec(t, p)[0]


# -- FID ------------------------------------------------------------------------


def test_fid_1d_closed_form():
    rng = np.random.default_rng(5)
    a = rng.normal(1.0, 2.0, 100_000)
    b = rng.normal(-0.5, 0.7, 100_000)
    expected = (1.0 + 0.5) ** 2 + (2.0 - 0.7) ** 2
    assert fid(a, b) == pytest.approx(expected, rel=0.02)


def test_fid_identity_and_symmetry():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(200, 5))
    y = rng.normal(0.3, 1.5, size=(200, 5))
    assert fid(x, x) == pytest.approx(0.0, abs=1e-8)
    assert fid(x, y) == pytest.approx(fid(y, x), rel=1e-6)
    assert fid(x, y) > 0


def test_fid_multivariate_closed_form():
    # diagonal covariances: sum of squared mean gaps plus squared std gaps per axis
    rng = np.random.default_rng(7)
    x = rng.normal([0, 1], [1, 2], size=(200_000, 2))
    y = rng.normal([1, 1], [3, 2], size=(200_000, 2))
    assert fid(x, y) == pytest.approx(1.0 + 4.0, rel=0.03)


def test_fid_rejects_bad_inputs():
    with pytest.raises(ValueError):
        fid(np.zeros((1, 3)), np.zeros((5, 3)))
    with pytest.raises(ShapeError):
        fid(np.zeros((5, 3)), np.zeros((5, 2)))


def test_embedding_deterministic_and_permutation_equivariant():
    rng = np.random.default_rng(8)
    imgs = [rng.random((32, 32)) for _ in range(6)]
    e1 = embed(imgs, RandomConvExtractor(embed_dim=16))
    e2 = embed(imgs, RandomConvExtractor(embed_dim=16))
    assert e1.shape == (6, 16)
    np.testing.assert_array_equal(e1, e2)
    perm = [3, 1, 5, 0, 2, 4]
    np.testing.assert_allclose(embed([imgs[i] for i in perm], RandomConvExtractor(embed_dim=16)), e1[perm], atol=1e-12)


def test_extractor_lookup():
    assert isinstance(get_extractor("random_conv"), RandomConvExtractor)
    with pytest.raises(ConfigError, match="eval.extractor"):
        get_extractor("inception")
    with pytest.raises(ConfigError):
        embed([np.zeros((8, 8))], None)


# -- fold aggregation -----------------------------------------------------------------


def test_fold_report_matches_t_oracle():
    vals = list(np.random.default_rng(9).normal(80, 5, 20))
    rep = fold_report(vals, 10)
    means = [(vals[2 * i] + vals[2 * i + 1]) / 2 for i in range(10)]
    m, ci = t_interval(means)
    assert rep.n_folds == 10
    assert rep.mean == pytest.approx(m, abs=1e-12)
    assert rep.ci95 == pytest.approx(ci, rel=1e-8)


def test_fold_report_uneven_folds():
    rep = fold_report(range(7), 3)
    # leading folds take the remainder: [0,1,2] [3,4] [5,6]
    assert rep.fold_means == (1.0, 3.5, 5.5)


def test_fold_report_rejects_too_many_folds():
    with pytest.raises(ValueError):
        fold_report([1.0, 2.0], 3)


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=10, max_size=40), st.randoms())
def test_fold_count_one_mean_permutation_invariant(vals, rnd):
    shuffled = list(vals)
    rnd.shuffle(shuffled)
    assert fold_report(vals, 1).mean == pytest.approx(fold_report(shuffled, 1).mean, abs=1e-9)


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=20, max_size=20))
def test_equal_folds_mean_equals_overall_mean(vals):
    assert fold_report(vals, 10).mean == pytest.approx(math.fsum(vals) / 20, abs=1e-9)
