"""Elastic deformation augmentation tests.

The load-bearing bound: the smoothing kernel is a convex combination,
so a smoothed unit field stays inside [-1, 1) and the scaled field can
never exceed alpha in either component.
"""

import numpy as np
import pytest

from mmreg.augment import (
    DEFAULT_LEVELS,
    DeformParams,
    IntensityLevel,
    _smooth_plane,
    build_augmented_set,
    elastic_deform,
    gaussian_kernel1d,
    gaussian_smooth_field,
    random_unit_field,
    sample_deform_params,
)
from mmreg.errors import ParameterError
from mmreg.field import warp_bilinear
from mmreg.pipeline import PairRecord
from mmreg.rng import Xoshiro256pp, derive_seed

from conftest import random_image


# ------------------------------------------------------ unit field


def test_unit_field_range_and_shape():
    fld = random_unit_field(7, 5, seed=3)
    assert fld.shape == (5, 7, 2)
    assert np.all(fld >= -1.0) and np.all(fld < 1.0)


def test_unit_field_pinned_draw_order():
    # row-major, dx then dy, straight off one stream
    fld = random_unit_field(4, 3, seed=11)
    expected = Xoshiro256pp(11).uniform_signed_array(24).reshape(3, 4, 2)
    np.testing.assert_array_equal(fld, expected)


def test_unit_field_determinism_and_validation():
    np.testing.assert_array_equal(random_unit_field(6, 4, 9), random_unit_field(6, 4, 9))
    assert not np.array_equal(random_unit_field(6, 4, 9), random_unit_field(6, 4, 10))
    with pytest.raises(ParameterError):
        random_unit_field(0, 4, 1)


# -------------------------------------------------------- kernel


def test_kernel_sums_to_one_and_is_symmetric():
    for size, sigma in ((1, 1.0), (5, 0.8), (21, 4.0), (41, 6.0)):
        k = gaussian_kernel1d(size, sigma)
        assert k.size == size
        assert k.sum() == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(k, k[::-1], rtol=0, atol=1e-15)
        assert np.argmax(k) == size // 2
        assert np.all(k > 0.0)


def test_kernel_matches_gaussian_ratio():
    k = gaussian_kernel1d(5, 1.0)
    # tap ratio is exp(-x^2/2) before normalisation
    assert k[1] / k[2] == pytest.approx(np.exp(-0.5), rel=1e-12)
    assert k[0] / k[2] == pytest.approx(np.exp(-2.0), rel=1e-12)


def test_kernel_validation():
    with pytest.raises(ParameterError):
        gaussian_kernel1d(4, 1.0)
    with pytest.raises(ParameterError):
        gaussian_kernel1d(0, 1.0)
    with pytest.raises(ParameterError):
        gaussian_kernel1d(5, 0.0)
    with pytest.raises(ParameterError):
        gaussian_kernel1d(5, -2.0)


def _smooth_brute(arr, kernel):
    """Dense 2D correlation with clamp-to-edge padding, outer-product kernel."""
    r = (kernel.size - 1) // 2
    k2 = np.outer(kernel, kernel)
    padded = np.pad(arr, r, mode="edge")
    out = np.zeros_like(arr)
    for y in range(arr.shape[0]):
        for x in range(arr.shape[1]):
            out[y, x] = np.sum(padded[y : y + 2 * r + 1, x : x + 2 * r + 1] * k2)
    return out


def test_smooth_plane_matches_dense_correlation():
    for seed in range(5):
        arr = random_image(seed, 9, 7, lo=-1.0, hi=1.0)
        k = gaussian_kernel1d(5, 1.3)
        np.testing.assert_allclose(_smooth_plane(arr, k), _smooth_brute(arr, k), rtol=0, atol=1e-13)


def test_smooth_plane_preserves_constants_and_identity():
    arr = np.full((6, 8), 0.37)
    k = gaussian_kernel1d(21, 4.0)
    np.testing.assert_allclose(_smooth_plane(arr, k), 0.37, rtol=0, atol=1e-12)
    rough = random_image(2, 6, 8)
    np.testing.assert_array_equal(_smooth_plane(rough, gaussian_kernel1d(1, 1.0)), rough)


def test_smooth_field_applies_kernel_per_component():
    fld = random_unit_field(8, 6, seed=4)
    p = DeformParams(sigma=1.5, alpha=3.0, filter_size=7, seed=0)
    out = gaussian_smooth_field(fld, p)
    k = gaussian_kernel1d(7, 1.5)
    np.testing.assert_array_equal(out[..., 0], _smooth_plane(fld[..., 0], k))
    np.testing.assert_array_equal(out[..., 1], _smooth_plane(fld[..., 1], k))


# ------------------------------------------------- elastic deform


def test_deform_field_bounded_by_alpha_100_draws():
    img = random_image(0, 12, 16)
    for i in range(100):
        level = list(DEFAULT_LEVELS.values())[i % 3]
        params = sample_deform_params(level, seed=derive_seed(77, i))
        _, fld = elastic_deform(img, params)
        assert np.max(np.abs(fld)) <= params.alpha


def test_deform_alpha_zero_is_identity():
    img = random_image(1, 10, 14)
    params = DeformParams(sigma=5.0, alpha=0.0, filter_size=21, seed=6)
    warped, fld = elastic_deform(img, params)
    np.testing.assert_array_equal(warped, img)
    np.testing.assert_array_equal(fld, 0.0)


def test_deform_is_deterministic_and_consistent_with_warp():
    img = random_image(2, 10, 14)
    params = DeformParams(sigma=2.0, alpha=4.0, filter_size=9, seed=13)
    w1, f1 = elastic_deform(img, params)
    w2, f2 = elastic_deform(img, params)
    assert w1.tobytes() == w2.tobytes() and f1.tobytes() == f2.tobytes()
    np.testing.assert_array_equal(w1, warp_bilinear(img, f1))


def test_deform_smoothing_shrinks_roughness():
    img = random_image(3, 16, 16)
    rough = DeformParams(sigma=1.0, alpha=2.0, filter_size=3, seed=8)
    smooth = DeformParams(sigma=8.0, alpha=2.0, filter_size=31, seed=8)
    _, f_rough = elastic_deform(img, rough)
    _, f_smooth = elastic_deform(img, smooth)

    def tv(f):
        return np.abs(np.diff(f, axis=0)).mean() + np.abs(np.diff(f, axis=1)).mean()

    assert tv(f_smooth) < 0.25 * tv(f_rough)


# ------------------------------------------------- level sampling


def test_default_levels_table():
    assert set(DEFAULT_LEVELS) == {"low", "medium", "high"}
    low, med, high = DEFAULT_LEVELS["low"], DEFAULT_LEVELS["medium"], DEFAULT_LEVELS["high"]
    assert low.sigma_range == (8.0, 12.0) and low.alpha_range == (4.0, 8.0) and low.filter_sizes == (21,)
    assert med.sigma_range == (6.0, 10.0) and med.alpha_range == (8.0, 16.0) and med.filter_sizes == (21, 31)
    assert high.sigma_range == (4.0, 8.0) and high.alpha_range == (16.0, 32.0) and high.filter_sizes == (31, 41)
    # stronger levels push displacement up while relaxing smoothness
    assert low.alpha_range[1] <= med.alpha_range[1] <= high.alpha_range[1]


def test_sample_params_within_level_ranges():
    for name, level in DEFAULT_LEVELS.items():
        for seed in range(50):
            p = sample_deform_params(level, seed)
            assert level.sigma_range[0] <= p.sigma < level.sigma_range[1]
            assert level.alpha_range[0] <= p.alpha < level.alpha_range[1]
            assert p.filter_size in level.filter_sizes


def test_sample_params_pinned_draw_order():
    level = DEFAULT_LEVELS["medium"]
    p = sample_deform_params(level, seed=21)
    rng = Xoshiro256pp(derive_seed(21, 0))
    assert p.sigma == rng.uniform_in(*level.sigma_range)
    assert p.alpha == rng.uniform_in(*level.alpha_range)
    assert p.filter_size == level.filter_sizes[rng.next_below(len(level.filter_sizes))]
    assert p.seed == derive_seed(21, 1)


def test_deform_params_validation():
    with pytest.raises(ParameterError):
        DeformParams(sigma=-1.0, alpha=2.0, filter_size=5, seed=0)
    with pytest.raises(ParameterError):
        DeformParams(sigma=1.0, alpha=-0.5, filter_size=5, seed=0)
    with pytest.raises(ParameterError):
        DeformParams(sigma=1.0, alpha=2.0, filter_size=4, seed=0)


# ---------------------------------------------- augmented dataset


def _base_pairs(n=2, h=10, w=12):
    out = []
    for i in range(n):
        out.append(
            PairRecord(
                id=f"p{i}",
                fixed=random_image(10 + i, h, w),
                moving=random_image(20 + i, h, w),
            )
        )
    return out


def test_augmented_set_unsupervised_structure():
    pairs = _base_pairs()
    recs = build_augmented_set(pairs, per_pair=3, levels=[("low", 1.0)], seed=5)
    assert len(recs) == 6
    assert [r.id for r in recs[:3]] == ["p0-aug00", "p0-aug01", "p0-aug02"]
    for i, pair in enumerate(pairs):
        for k in range(3):
            r = recs[i * 3 + k]
            assert r.source == pair.id
            assert r.label is None
            np.testing.assert_array_equal(r.moving, pair.moving)  # passthrough
            assert r.truth_field is not None and r.truth_field.shape == (10, 12, 2)
            assert not np.array_equal(r.fixed, pair.fixed)
            assert r.meta["level"] == "low"
            assert set(r.meta) == {"level", "sigma", "alpha", "filter_size", "field_seed"}


def test_augmented_set_supervised_keeps_original_as_label():
    pairs = _base_pairs(1)
    recs = build_augmented_set(pairs, per_pair=2, levels=[("medium", 1.0)], seed=6, mode="supervised")
    for r in recs:
        np.testing.assert_array_equal(r.fixed, pairs[0].fixed)  # passthrough
        np.testing.assert_array_equal(r.label, pairs[0].moving)
        assert not np.array_equal(r.moving, pairs[0].moving)
        # deformed moving really is the label pushed through the stored field
        np.testing.assert_array_equal(r.moving, warp_bilinear(r.label, r.truth_field))


def test_augmented_record_regenerable_from_flat_index():
    pairs = _base_pairs()
    recs = build_augmented_set(pairs, per_pair=2, levels=[("high", 1.0)], seed=9)
    i, k = 1, 1
    rec = recs[i * 2 + k]
    rec_seed = derive_seed(9, i * 2 + k)
    params = sample_deform_params(DEFAULT_LEVELS["high"], derive_seed(rec_seed, 1))
    deformed, fld = elastic_deform(pairs[i].fixed, params)
    np.testing.assert_array_equal(rec.fixed, deformed)
    np.testing.assert_array_equal(rec.truth_field, fld)
    assert rec.meta["field_seed"] == params.seed


def test_augmented_set_respects_level_mix():
    pairs = _base_pairs(1)
    recs = build_augmented_set(pairs, per_pair=20, levels=[("low", 0.0), ("high", 1.0)], seed=4)
    assert {r.meta["level"] for r in recs} == {"high"}
    mixed = build_augmented_set(pairs, per_pair=60, levels=[("low", 1.0), ("high", 1.0)], seed=4)
    names = [r.meta["level"] for r in mixed]
    assert 15 <= names.count("low") <= 45


def test_augmented_set_byte_level_determinism():
    pairs = _base_pairs()
    levels = [("low", 2.0), ("medium", 1.0), ("high", 1.0)]
    a = build_augmented_set(pairs, per_pair=4, levels=levels, seed=31)
    b = build_augmented_set(pairs, per_pair=4, levels=levels, seed=31)
    for ra, rb in zip(a, b):
        assert ra.id == rb.id and ra.meta == rb.meta
        assert ra.fixed.tobytes() == rb.fixed.tobytes()
        assert ra.truth_field.tobytes() == rb.truth_field.tobytes()
    c = build_augmented_set(pairs, per_pair=4, levels=levels, seed=32)
    assert any(ra.fixed.tobytes() != rc.fixed.tobytes() for ra, rc in zip(a, c))


def test_augmented_set_validation():
    pairs = _base_pairs(1)
    with pytest.raises(ParameterError, match="mode"):
        build_augmented_set(pairs, per_pair=1, levels=[("low", 1.0)], seed=0, mode="direct")
    with pytest.raises(ParameterError, match="per_pair"):
        build_augmented_set(pairs, per_pair=0, levels=[("low", 1.0)], seed=0)
    with pytest.raises(ParameterError, match="unknown level"):
        build_augmented_set(pairs, per_pair=1, levels=[("mild", 1.0)], seed=0)
    with pytest.raises(ParameterError, match="weight"):
        build_augmented_set(pairs, per_pair=1, levels=[("low", -1.0)], seed=0)
    with pytest.raises(ParameterError, match="positive weight"):
        build_augmented_set(pairs, per_pair=1, levels=[("low", 0.0)], seed=0)


def test_augmented_set_accepts_custom_level_objects():
    tiny = IntensityLevel("tiny", (2.0, 3.0), (0.5, 1.0), (5,))
    recs = build_augmented_set(_base_pairs(1), per_pair=2, levels=[(tiny, 1.0)], seed=2)
    for r in recs:
        assert r.meta["level"] == "tiny"
        assert np.max(np.abs(r.truth_field)) <= 1.0
