import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lossmix_lab.mixing import (MixConfig, adjust_boxes, make_batch_pairs, mix_batch, mix_images_pixel,
                                mix_images_region, mix_onehot, mix_pair, mix_targets, region_mask,
                                sample_beta, sample_lambda)
from lossmix_lab.scenegen import ImageSample, Instance, SceneConfig, generate_scene, make_rng


def rng(seed=0):
    return np.random.default_rng(seed)


def insts(*boxes, cls=0):
    return [Instance(cls, b) for b in boxes]


# -- lambda ---------------------------------------------------------------


def test_beta_uniform_moments():
    x = sample_beta(1.0, rng(1), size=100_000)
    assert abs(x.mean() - 0.5) < 0.01
    assert abs(x.var() - 1 / 12) < 0.005
    assert x.min() >= 0.0 and x.max() <= 1.0


def test_beta_concentrates_for_large_alpha():
    assert sample_beta(20.0, rng(2), size=100_000).var() < sample_beta(1.0, rng(2), size=100_000).var()


def test_beta_alpha_one_matches_uniform_distribution():
    x = np.sort(sample_beta(1.0, rng(3), size=50_000))
    ecdf = np.arange(1, x.size + 1) / x.size
    assert np.abs(ecdf - x).max() < 0.01


def test_lambda_determinism_and_validation():
    a = [sample_lambda(0.5, make_rng(4, 2)) for _ in range(3)]
    r1, r2 = make_rng(4, 2), make_rng(4, 2)
    assert [sample_lambda(0.5, r1) for _ in range(5)] == [sample_lambda(0.5, r2) for _ in range(5)]
    assert len(set(a)) == 1
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            sample_lambda(bad, rng())


# -- pixel mixing ------------------------------------------------------------


def test_pixel_lambda_one_is_padded_img_i():
    a = rng(5).uniform(size=(4, 6, 3))
    b = rng(6).uniform(size=(6, 4, 3))
    mixed, off_i, off_j = mix_images_pixel(a, b, 1.0)
    assert mixed.shape == (6, 6, 3)
    assert off_i == (0, 1) and off_j == (1, 0)
    expected = np.zeros((6, 6, 3))
    expected[1:5, 0:6] = a
    np.testing.assert_array_equal(mixed, expected)


def test_pixel_constant_images():
    mixed, _, _ = mix_images_pixel(np.full((2, 2, 1), 0.2), np.full((2, 2, 1), 0.6), 0.5)
    np.testing.assert_allclose(mixed, 0.4, rtol=0, atol=1e-15)


def test_pixel_unequal_sizes_against_per_pixel_oracle():
    a = rng(7).uniform(size=(4, 4, 3))
    b = rng(8).uniform(size=(2, 2, 3))
    mixed, off_i, off_j = mix_images_pixel(a, b, 0.5)
    assert off_i == (0, 0) and off_j == (1, 1)
    for y in range(4):
        for x in range(4):
            inside = 1 <= y < 3 and 1 <= x < 3
            bj = b[y - 1, x - 1] if inside else np.zeros(3)
            np.testing.assert_array_equal(mixed[y, x], 0.5 * a[y, x] + 0.5 * bj)
    np.testing.assert_array_equal(mixed[0, 0], 0.5 * a[0, 0])


def test_pixel_channel_mismatch():
    with pytest.raises(ValueError, match="channel"):
        mix_images_pixel(np.zeros((2, 2, 3)), np.zeros((2, 2, 1)), 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 1000))
def test_pixel_mix_stays_in_unit_range(lam, seed):
    r = rng(seed)
    mixed, _, _ = mix_images_pixel(r.uniform(size=(5, 3, 2)), r.uniform(size=(3, 6, 2)), lam)
    assert mixed.min() >= 0.0 and mixed.max() <= 1.0


# -- region mixing -----------------------------------------------------------


def test_region_endpoints_and_area():
    a, b = rng(9).uniform(size=(8, 8, 3)), rng(10).uniform(size=(8, 8, 3))
    out, rect, eff = mix_images_region(a, b, 1.0, rng())
    np.testing.assert_array_equal(out, a)
    assert eff == 1.0
    out, rect, eff = mix_images_region(a, b, 0.0, rng())
    np.testing.assert_array_equal(out, b)
    assert eff == 0.0
    out, rect, eff = mix_images_region(a, b, 0.75, rng())
    assert (out != a).any(axis=2).sum() == 16
    assert eff == 0.75
    x1, y1, x2, y2 = rect
    assert (x2 - x1) * (y2 - y1) == 16


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1), st.integers(8, 40), st.integers(8, 40), st.integers(0, 10_000))
def test_region_effective_lambda_within_one_pixel(lam, h, w, seed):
    mask, rect = region_mask(h, w, lam, rng(seed))
    eff = 1.0 - mask.sum() / (h * w)
    assert abs(eff - lam) <= 1.0 / (h * w) / 2 + 1e-12
    if mask.any():
        ys, xs = np.nonzero(mask)
        x1, y1, x2, y2 = rect
        assert xs.min() >= x1 and xs.max() < x2 and ys.min() >= y1 and ys.max() < y2


def test_region_resizes_j_first():
    a = np.zeros((8, 8, 1))
    b = np.ones((4, 4, 1))
    out, _, eff = mix_images_region(a, b, 0.5, rng())
    assert out.shape == (8, 8, 1) and out.sum() == 32 and eff == 0.5


# -- boxes and targets -------------------------------------------------------


def test_adjust_boxes():
    y = insts((1, 1, 3, 3))
    assert adjust_boxes(y, (0, 0)) == y
    moved = adjust_boxes(y, (2, 5))
    assert moved[0].box == (3.0, 6.0, 5.0, 8.0)
    assert adjust_boxes(moved, (-2, -5)) == y


def test_mix_targets_examples():
    y_i, y_j = insts((0, 0, 4, 4), cls=0), insts((5, 5, 9, 9), (1, 1, 2, 2), cls=1)
    sets = mix_targets("lossmix", y_i, y_j, 0.3)
    assert [w for _, w in sets] == [0.3, 0.7]
    assert sum(w for _, w in sets) == 1.0
    assert all(i.mix_weight == w for insts_, w in sets for i in insts_)

    (union, w), = mix_targets("union", y_i, y_j, 0.3)
    assert w == 1.0 and len(union) == 3 and all(i.mix_weight == 1.0 for i in union)

    (kept, w), = mix_targets("noise", y_i, y_j, 0.12)
    assert kept == y_i and w == 1.0

    with pytest.raises(ValueError):
        mix_targets("bogus", y_i, y_j, 0.5)
    with pytest.raises(ValueError):
        mix_targets("label_mixup", y_i, y_j, 0.5)


def test_lossmix_endpoints_collapse_to_one_set():
    y_i, y_j = insts((0, 0, 4, 4)), insts((5, 5, 9, 9))
    assert mix_targets("lossmix", y_i, y_j, 1.0) == [(y_i, 1.0)]
    assert mix_targets("lossmix", y_i, y_j, 0.0) == [(y_j, 1.0)]


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1))
def test_lossmix_weights_sum_to_one_exactly(lam):
    sets = mix_targets("lossmix", insts((0, 0, 4, 4)), insts((1, 1, 5, 5)), lam)
    assert sum(w for _, w in sets) == 1.0


def test_mix_onehot():
    np.testing.assert_array_equal(mix_onehot([1, 0], [0, 1], 0.25), [0.25, 0.75])


def test_mix_pair_offsets_and_clipping():
    cfg = SceneConfig()
    big = generate_scene(1, cfg)
    small = ImageSample(np.ones((32, 40, 3)), insts((0, 0, 10, 10)), "source", 0)
    m = mix_pair(big, small, "lossmix", 0.4)
    assert m.offsets == ((0, 0), (12, 16))
    (yi, wi), (yj, wj) = m.weighted_labels
    assert yj[0].box == (12.0, 16.0, 22.0, 26.0) and wj == pytest.approx(0.6)
    n = mix_pair(big, small, "noise", 0.1)
    np.testing.assert_allclose(n.image, 0.9 * big.image + 0.1 * np.pad(
        small.image, ((16, 16), (12, 12), (0, 0))), rtol=0, atol=1e-15)


def test_batch_pairs():
    assert make_batch_pairs(1, rng()) == [(0, 0)]
    assert make_batch_pairs(8, rng(3)) == make_batch_pairs(8, rng(3))
    r = rng(4)
    counts = np.zeros((8, 8))
    for _ in range(10_000):
        for k, j in make_batch_pairs(8, r):
            counts[k, j] += 1
    assert np.abs(counts / 10_000 - 1 / 8).max() < 0.02


def test_mix_config_validation_names_key():
    with pytest.raises(ValueError, match="mix.alpha"):
        MixConfig(alpha=-1.0)
    with pytest.raises(ValueError, match="mix.noise_lambda_max"):
        MixConfig(noise_lambda_max=0.6)
    with pytest.raises(ValueError, match="mix.strategy"):
        MixConfig(strategy="cutout")


def test_mix_batch_modes():
    cfg = SceneConfig()
    batch = [generate_scene(s, cfg) for s in range(6)]
    plain = mix_batch(batch, MixConfig(strategy="none"), rng())
    assert all(m.lam == 1.0 and len(m.weighted_labels) == 1 for m in plain)
    reg = mix_batch(batch, MixConfig(reg_style=True), rng(1))
    assert all(m.strategy == "none" for m in reg[3:])
    off = mix_batch(batch, MixConfig(), rng(1), enabled=False)
    assert all(np.array_equal(m.image, s.image) for m, s in zip(off, batch))
    with pytest.raises(ValueError):
        mix_batch(batch, MixConfig(strategy="label_mixup"), rng())
    region = mix_batch(batch, MixConfig(input_mixer="region"), rng(2))
    assert all(m.rect is not None for m in region)
