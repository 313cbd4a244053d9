import hashlib
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octaquant import augment as aug
from oracles import global_he


def rand_img(seed, shape=(32, 24)):
    return np.random.default_rng(seed).integers(0, 256, shape).astype(np.uint8)


# --------------------------------------------------------------------------
# rotation


def test_rotate_identity_and_full_turn():
    img = rand_img(0)
    np.testing.assert_array_equal(aug.rotate90(img, 0), img)
    out = img
    for _ in range(4):
        out = aug.rotate90(out, 1)
    np.testing.assert_array_equal(out, img)


def test_rotate_index_map():
    img = rand_img(1, (7, 5))
    h = img.shape[0]
    out = aug.rotate90(img, 1)
    assert out.shape == (5, 7)
    for r in range(7):
        for c in range(5):
            assert out[c, h - 1 - r] == img[r, c]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(-8, 8), st.integers(0, 999))
def test_rotate_composition(h, w, k, seed):
    img = rand_img(seed, (h, w))
    np.testing.assert_array_equal(aug.rotate90(aug.rotate90(img, k), -k), img)
    np.testing.assert_array_equal(aug.rotate90(img, k), aug.rotate90(img, k % 4))


# --------------------------------------------------------------------------
# contrast


def test_clahe_constant_image():
    img = np.full((32, 32), 77, np.uint8)
    out = aug.clahe(img)
    assert np.unique(out).size == 1


def test_clahe_single_tile_unclipped_equals_global_he():
    for seed in range(5):
        img = (np.random.default_rng(seed).beta(2, 5, (40, 48)) * 255).astype(np.uint8)
        np.testing.assert_array_equal(aug.clahe(img, tiles=(1, 1), clip_limit=np.inf), global_he(img))


def test_clahe_codomain_and_padding():
    img = rand_img(3, (37, 29))
    out = aug.clahe(img, tiles=(4, 3))
    assert out.shape == img.shape and out.dtype == np.uint8


def test_clahe_clip_limits_contrast_gain():
    img = (np.random.default_rng(4).normal(120, 4, (64, 64))).clip(0, 255).astype(np.uint8)
    loose = aug.clahe(img, (2, 2), 100.0)
    tight = aug.clahe(img, (2, 2), 1.0)
    assert tight.std() < loose.std()


def test_clahe_rejects_low_clip():
    with pytest.raises(ValueError):
        aug.clahe(rand_img(0), clip_limit=0.5)


def test_percentile_remap_uniform_near_identity():
    # the 1st/99th percentiles of 0..255 sit ~2.5 levels inside the range, so the
    # stretch moves extreme values by up to 3 grey levels; see the decisions ledger
    img = np.tile(np.arange(256, dtype=np.uint8), (64, 1))
    out = aug.percentile_remap(img)
    assert np.abs(out.astype(int) - img.astype(int)).max() <= 3
    assert out.min() == 0 and out.max() == 255


def test_percentile_remap_constant():
    img = np.full((10, 10), 90, np.uint8)
    np.testing.assert_array_equal(aug.percentile_remap(img), img)


def test_percentile_remap_hits_extremes():
    for seed in range(20):
        img = (np.random.default_rng(seed).normal(128, 20, (50, 50))).clip(0, 255).astype(np.uint8)
        lo, hi = np.percentile(img, [1, 99])
        assert (img <= lo).mean() >= 0.01 and (img >= hi).mean() >= 0.01
        out = aug.percentile_remap(img)
        # pixels at or beyond the percentiles map to the ends
        assert out[img <= lo].max() == 0 and out[img >= hi].min() == 255
        assert out.min() == 0 and out.max() == 255


def test_percentile_remap_linear_oracle():
    img = rand_img(7, (30, 30))
    lo, hi = np.percentile(img, [1, 99])
    exp = np.clip(np.floor((img - lo) * 255.0 / (hi - lo) + 0.5), 0, 255)
    assert np.abs(aug.percentile_remap(img).astype(float) - exp).max() <= 1


# --------------------------------------------------------------------------
# strip shuffle


def row_hashes(a):
    return [hashlib.sha1(row.tobytes()).hexdigest() for row in a]


def test_strip_shuffle_single_strip_identity():
    img, msk = rand_img(0), rand_img(1) > 128
    a, b = aug.strip_shuffle(img, msk, seed=3, strip_count=1)
    np.testing.assert_array_equal(a, img)
    np.testing.assert_array_equal(b, msk)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40), st.integers(1, 10), st.integers(0, 10_000))
def test_strip_shuffle_is_row_permutation(h, w, seed):
    img = rand_img(seed, (h, w))
    msk = rand_img(seed + 1, (h, w)) > 100
    a, b = aug.strip_shuffle(img, msk, seed=seed)
    assert Counter(a.ravel().tolist()) == Counter(img.ravel().tolist())
    assert Counter(b.ravel().tolist()) == Counter(msk.ravel().tolist())
    # mask rows follow image rows: pair every image row with its mask row and compare the multisets
    orig = Counter(zip(row_hashes(img), row_hashes(msk)))
    assert Counter(zip(row_hashes(a), row_hashes(b))) == orig


def test_strip_shuffle_follows_rows_exactly():
    h = 48
    img = np.repeat(np.arange(h, dtype=np.uint8)[:, None], 5, axis=1)
    msk = (np.arange(h)[:, None] % 3 == 0).repeat(5, axis=1)
    a, b = aug.strip_shuffle(img, msk, seed=11)
    src = a[:, 0].astype(int)
    np.testing.assert_array_equal(b, msk[src])
    assert sorted(src.tolist()) == list(range(h))
    # strips are contiguous ascending runs
    breaks = int(np.sum(np.diff(src) != 1))
    assert breaks <= 12 - 1


def test_strip_shuffle_deterministic():
    img, msk = rand_img(5), rand_img(6) > 128
    a = aug.strip_shuffle(img, msk, seed=7)
    b = aug.strip_shuffle(img, msk, seed=7)
    assert row_hashes(a[0]) == row_hashes(b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_strip_shuffle_shape_mismatch():
    with pytest.raises(ValueError):
        aug.strip_shuffle(np.zeros((4, 4)), np.zeros((4, 5)), seed=0)


# --------------------------------------------------------------------------
# plans


def test_default_plan_expands_to_13():
    img, msk = rand_img(0, (32, 32)), rand_img(1, (32, 32)) > 128
    plan = aug.AugmentPlan(seed=3)
    out = aug.expand((img, msk), plan)
    assert plan.expansion_factor() == 13 == len(out)


@pytest.mark.parametrize("plain,contrast,sp,sc", [(0, 0, False, False), (3, 0, True, False),
                                                   (1, 2, True, True), (3, 5, False, True)])
def test_expansion_factor_matches_output(plain, contrast, sp, sc):
    plan = aug.AugmentPlan(1, plain, contrast, shuffle_plain=sp, shuffle_contrast=sc)
    n = len(aug.expand((rand_img(0, (16, 16)), rand_img(1, (16, 16)) > 128), plan))
    assert n == plan.expansion_factor() == 1 + plain + contrast + (1 + plain if sp else 0) + (contrast if sc else 0)


def test_expand_geometry_and_intensity_rules():
    img, msk = rand_img(2, (32, 32)), rand_img(3, (32, 32)) > 128
    out = aug.expand((img, msk), aug.AugmentPlan(seed=5))
    for k in range(4):
        np.testing.assert_array_equal(out[k][0], aug.rotate90(img, k))
        np.testing.assert_array_equal(out[k][1], aug.rotate90(msk, k))
    for i in range(5):
        k = (i + 1) % 4
        # contrast copies carry the plainly rotated mask
        np.testing.assert_array_equal(out[4 + i][1], aug.rotate90(msk, k))
        assert out[4 + i][0].shape == aug.rotate90(img, k).shape
    for j in range(4):
        a, b = out[9 + j]
        assert Counter(zip(row_hashes(a), row_hashes(b))) == Counter(
            zip(row_hashes(out[j][0]), row_hashes(out[j][1])))


def test_expand_deterministic():
    pair = (rand_img(4, (32, 32)), rand_img(5, (32, 32)) > 128)
    a = aug.expand(pair, aug.AugmentPlan(seed=8))
    b = aug.expand(pair, aug.AugmentPlan(seed=8))
    for (ia, ma), (ib, mb) in zip(a, b):
        np.testing.assert_array_equal(ia, ib)
        np.testing.assert_array_equal(ma, mb)


def test_plan_validation():
    with pytest.raises(ValueError):
        aug.AugmentPlan(contrast_ops=("sharpen",))
    with pytest.raises(ValueError):
        aug.AugmentPlan(strip_count_range=(5, 2))
