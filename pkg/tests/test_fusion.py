import numpy as np
import pytest

from oracles import laplacian_impulse_loss
from posefuse.fusion import (LossWeights, compute_weights, fuse, image_loss, integrate,
                             laplacian_masked, smooth_loss, weighted_blend)
from posefuse.raster import FeatureMap, ProjectedMap


def pmap(values, valid=None, k=0):
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[..., None]
    if valid is None:
        valid = np.ones(values.shape[:2], dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    return ProjectedMap(FeatureMap(np.where(valid[..., None], values, 0.0), valid), valid, k)


def random_maps(rng, k, shape=(6, 5, 4), p_valid=0.7):
    return [pmap(rng.uniform(0, 1, shape), rng.uniform(size=shape[:2]) < p_valid, i)
            for i in range(k)]


def test_integrate_single_view_is_identity():
    rng = np.random.default_rng(0)
    m = random_maps(rng, 1)[0]
    out = integrate([m])
    assert np.array_equal(out.valid_mask, m.valid_mask)
    assert np.array_equal(out.values[m.valid_mask], m.features.values[m.valid_mask])


def test_integrate_median_of_three():
    maps = [pmap(np.full((1, 1), v)) for v in (0.9, 0.2, 0.5)]
    assert integrate(maps).values[0, 0, 0] == 0.5


def test_integrate_ignores_invalid_views_and_rejects_empty():
    a = pmap(np.full((1, 2), 0.3))
    b = pmap(np.full((1, 2), 0.9), [[True, False]])
    out = integrate([a, b])
    assert out.values[0, 1, 0] == 0.3
    assert out.values[0, 0, 0] == pytest.approx(0.6)
    with pytest.raises(ValueError, match="no views"):
        integrate([])


def test_integrate_outlier_view_matches_clean_median():
    rng = np.random.default_rng(1)
    base = rng.uniform(0.4, 0.6, size=(8, 8, 3))
    clean = [pmap(base + rng.normal(0, 0.005, base.shape)) for _ in range(4)]
    outlier = pmap(np.zeros_like(base))  # background bleed
    got = integrate(clean + [outlier]).values
    vals = np.stack([m.features.values for m in clean])
    lo = np.sort(vals, axis=0)[1]
    hi = np.sort(vals, axis=0)[2]
    # 5-view median with one low outlier is the 2nd smallest clean value
    assert np.allclose(got, lo, atol=1e-6)
    assert np.all((got >= lo) & (got <= hi))


def test_weights_single_view_and_symmetric_pair():
    m = pmap(np.full((3, 3), 0.4), np.eye(3, dtype=bool))
    (w,) = compute_weights([m], integrate([m]))
    assert np.all(w[m.valid_mask] == 1.0) and np.all(w[~m.valid_mask] == 0.0)
    a, b = pmap(np.full((2, 2), 0.2)), pmap(np.full((2, 2), 0.6))
    wa, wb = compute_weights([a, b], FeatureMap(np.full((2, 2, 1), 0.4), np.ones((2, 2), bool)))
    assert np.allclose(wa, 0.5) and np.allclose(wb, 0.5)


def test_weights_closed_form_softmax():
    a, b = pmap(np.zeros((1, 1))), pmap(np.ones((1, 1)))
    ref = FeatureMap(np.zeros((1, 1, 1)), np.ones((1, 1), bool))
    wa, wb = compute_weights([a, b], ref, temperature=0.1)
    assert wa[0, 0] == pytest.approx(0.99995, abs=1e-4)
    assert wb[0, 0] == pytest.approx(0.00005, abs=1e-4)
    assert wa[0, 0] == pytest.approx(1 / (1 + np.exp(-10)), abs=1e-15)


def test_weights_reject_nonpositive_temperature():
    m = pmap(np.zeros((1, 1)))
    with pytest.raises(ValueError):
        compute_weights([m], integrate([m]), temperature=0.0)


@pytest.mark.parametrize("k", range(1, 9))
def test_weights_normalized_for_k_views(k):
    rng = np.random.default_rng(k)
    maps = random_maps(rng, k, (16, 16, 17))
    for temp in (1e-3, 0.05, 1.0, 50.0):
        res = fuse(maps, temp)
        w = np.stack(res.weights)
        total = w.sum(axis=0)
        assert np.all(np.abs(total[res.mask] - 1.0) <= 1e-6)
        assert np.all(total[~res.mask] == 0.0)
        assert np.all((w >= 0) & (w <= 1))
        for i, m in enumerate(maps):
            assert np.all(w[i][~m.valid_mask] == 0.0)


def test_weights_with_extreme_distances_stay_finite():
    a, b = pmap(np.zeros((1, 1))), pmap(np.full((1, 1), 1e6))
    ref = FeatureMap(np.zeros((1, 1, 1)), np.ones((1, 1), bool))
    w = compute_weights([a, b], ref, temperature=1e-6)
    assert w[0][0, 0] == 1.0 and w[1][0, 0] == 0.0


def test_blend_identical_views_is_fixed_point():
    rng = np.random.default_rng(2)
    vals = rng.uniform(size=(5, 5, 17))
    maps = [pmap(vals, k=i) for i in range(4)]
    res = fuse(maps)
    assert np.allclose(res.weighted.values, vals, atol=1e-6)
    assert np.array_equal(res.rendering, res.weighted.values[..., :3])


def test_blend_one_hot_selects():
    rng = np.random.default_rng(3)
    maps = random_maps(rng, 3, (4, 4, 2), p_valid=1.0)
    pick = rng.integers(0, 3, size=(4, 4))
    weights = [(pick == i).astype(float) for i in range(3)]
    x_s, x_d, union = weighted_blend(maps, weights)
    vals = np.stack([m.features.values for m in maps])
    expect = np.take_along_axis(vals, pick[None, ..., None], axis=0)[0]
    assert np.array_equal(x_s.values, expect)
    assert union.all()


def test_blend_convexity_on_10k_pixels():
    rng = np.random.default_rng(4)
    maps = random_maps(rng, 5, (100, 100, 3), p_valid=0.6)
    res = fuse(maps)
    vals = np.stack([m.features.values for m in maps])
    valid = np.stack([m.valid_mask for m in maps])
    lo = np.where(valid[..., None], vals, np.inf).min(axis=0)
    hi = np.where(valid[..., None], vals, -np.inf).max(axis=0)
    x = res.weighted.values
    m = res.mask
    assert m.sum() > 9000
    assert np.all(x[m] >= lo[m] - 1e-12) and np.all(x[m] <= hi[m] + 1e-12)


def test_fusion_permutation_invariance():
    rng = np.random.default_rng(5)
    maps = random_maps(rng, 6, (20, 20, 17))
    perm = rng.permutation(6)
    a = fuse(maps)
    b = fuse([maps[i] for i in perm])
    assert np.allclose(a.integrated.values, b.integrated.values, rtol=0, atol=1e-12)
    assert np.allclose(a.weighted.values, b.weighted.values, rtol=0, atol=1e-12)
    for j, i in enumerate(perm):
        assert np.allclose(a.weights[i], b.weights[j], rtol=0, atol=1e-12)


def test_lower_temperature_sharpens_weights():
    rng = np.random.default_rng(6)
    maps = random_maps(rng, 4, (10, 10, 17))
    ref = integrate(maps)
    prev = None
    for temp in (1.0, 0.3, 0.05, 0.01):
        top = np.stack(compute_weights(maps, ref, temp)).max(axis=0)
        if prev is not None:
            assert np.all(top >= prev - 1e-12)
        prev = top


def test_image_loss_examples():
    rng = np.random.default_rng(7)
    target = rng.uniform(0.2, 0.8, size=(12, 12, 3))
    mask = np.ones((12, 12), bool)
    assert image_loss(target, target, mask) == 0.0
    w = LossWeights(5.0, 0.0, 1.0)
    assert image_loss(target + 0.1, target, mask, w) == pytest.approx(1.5, abs=1e-12)
    pred = rng.uniform(size=target.shape)
    assert image_loss(pred, target, mask) == pytest.approx(image_loss(target, pred, mask))
    assert image_loss(pred, target, mask) > 0
    with pytest.raises(ValueError, match="empty evaluation region"):
        image_loss(pred, target, np.zeros((12, 12), bool))
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0, 0)


def test_loss_weight_defaults():
    w = LossWeights()
    assert (w.lambda_i, w.lambda_f, w.lambda_s) == (5.0, 10.0, 1.0)


def test_smooth_loss_constant_and_ramp():
    mask = np.ones((9, 11), bool)
    assert smooth_loss(np.full((9, 11, 17), 0.3), mask) == 0.0
    yy, xx = np.mgrid[0:9, 0:11]
    ramp = np.stack([0.01 * xx + 0.02 * yy, 0.03 * xx], axis=2)
    interior = np.zeros_like(mask)
    interior[1:-1, 1:-1] = True
    lap = laplacian_masked(ramp, mask)
    assert np.abs(lap[interior]).max() < 1e-6


def test_smooth_loss_impulse_closed_form():
    mask = np.ones((7, 7), bool)
    x = np.zeros((7, 7, 1))
    x[3, 3, 0] = 1.0
    assert smooth_loss(x, mask, 1.0) == pytest.approx(laplacian_impulse_loss(1.0, 49), abs=1e-12)
    x[3, 3, 0] = -2.5
    assert smooth_loss(x, mask, 2.0) == pytest.approx(laplacian_impulse_loss(-2.5, 49, 2.0))


def test_smooth_loss_replicates_at_mask_edge():
    mask = np.zeros((5, 5), bool)
    mask[1:4, 1:4] = True
    x = np.zeros((5, 5, 1))
    x[~mask] = 100.0  # values outside the mask must not leak in
    assert smooth_loss(x, mask) == 0.0
    with pytest.raises(ValueError):
        smooth_loss(x, np.zeros((5, 5), bool))
