import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from margiheat import heatmap_ops as ops
from margiheat.errors import (
    DegenerateTargetError,
    InvalidInputError,
    InvalidParameterError,
    PMFContractError,
    ShapeError,
    StateError,
)
from margiheat.heatmap_ops import MarginalHeatmapSet

from oracles import (
    loop_gaussian,
    loop_jsd,
    loop_kl,
    loop_marginals,
    loop_soft_argmax_2d,
    loop_soft_argmax_3d,
    random_pmf,
)

LN2 = math.log(2.0)


def delta(shape, idx):
    a = np.zeros(shape)
    a[idx] = 1.0
    return a


# --- render_gaussian_2d ------------------------------------------------------


def test_gaussian_symmetric_3x3():
    g = ops.render_gaussian_2d((1, 1), 1.0, (3, 3))
    assert g.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.unravel_index(g.argmax(), g.shape) == (1, 1)
    np.testing.assert_allclose(g, g.T, atol=1e-15)
    np.testing.assert_allclose(g, g[::-1, ::-1], atol=1e-15)


def test_gaussian_single_cell():
    np.testing.assert_array_equal(ops.render_gaussian_2d((0, 0), 1.0, (1, 1)), [[1.0]])


def test_gaussian_matches_loop_oracle():
    g = ops.render_gaussian_2d((7.25, 3.5), 1.0, (16, 16))
    assert np.abs(g - loop_gaussian(7.25, 3.5, 1.0, 16, 16)).max() < 1e-12


def test_gaussian_errors():
    with pytest.raises(InvalidParameterError):
        ops.render_gaussian_2d((1, 1), 0.0, (3, 3))
    with pytest.raises(InvalidParameterError):
        ops.render_gaussian_2d((1, 1), -1.0, (3, 3))
    with pytest.raises(DegenerateTargetError):
        ops.render_gaussian_2d((1e6, 1e6), 1.0, (8, 8))


def test_gaussian_batched_matches_single():
    centres = np.array([[[2.0, 3.0], [4.5, 1.25]]])
    g = ops.render_gaussian_2d(centres, 1.5, (6, 7))
    assert g.shape == (1, 2, 6, 7)
    for k in range(2):
        np.testing.assert_allclose(g[0, k], ops.render_gaussian_2d(centres[0, k], 1.5, (6, 7)), atol=1e-15)


def _shift_error(cx, cy, dx, dy, sigma, size=20):
    g0 = ops.render_gaussian_2d((cx, cy), sigma, (size, size))
    g1 = ops.render_gaussian_2d((cx + dx, cy + dy), sigma, (size, size))
    shifted = np.roll(np.roll(g0, dy, axis=0), dx, axis=1)
    return np.abs(shifted - g1).max()


@given(
    cx=st.floats(8.25, 10.75), cy=st.floats(8.25, 10.75),
    dx=st.integers(-3, 3), dy=st.integers(-3, 3),
)
def test_gaussian_translation_equivariance(cx, cy, dx, dy):
    # Centres stay >= 7 sigma from every border: the renormalization changes by < 1e-9.
    assert _shift_error(cx, cy, dx, dy, 0.75) < 1e-9


@given(
    cx=st.floats(6.0, 10.0), cy=st.floats(6.0, 10.0),
    dx=st.integers(-3, 3), dy=st.integers(-3, 3),
)
def test_gaussian_translation_equivariance_at_4_sigma(cx, cy, dx, dy):
    # At 4 sigma the truncated tail is not negligible at 1e-9; the error is
    # bounded by the mass of the off-grid cells, below 1e-6 here.
    assert _shift_error(cx, cy, dx, dy, 0.75) < 1e-6


# --- normalize_to_pmf ---------------------------------------------------------


def test_softmax_of_constant_is_uniform():
    np.testing.assert_allclose(ops.normalize_to_pmf(np.zeros((4, 4))), np.full((4, 4), 1 / 16), atol=1e-16)


def test_softmax_saturates():
    raw = np.zeros((4, 4))
    raw[2, 1] = 1000.0
    p = ops.normalize_to_pmf(raw)
    assert p[2, 1] == pytest.approx(1.0, abs=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        ops.normalize_to_pmf(np.array([[0.0, np.nan]]))
    with pytest.raises(InvalidInputError):
        ops.normalize_to_pmf(np.array([[0.0, np.inf]]))


@given(arrays(np.float64, (8, 8), elements=st.floats(-30, 30)), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(raw, c):
    p = ops.normalize_to_pmf(raw)
    assert abs(p.sum() - 1.0) < 1e-12
    assert (p >= 0).all()
    np.testing.assert_allclose(ops.normalize_to_pmf(raw + c), p, atol=1e-12)
    e = np.exp(raw)
    np.testing.assert_allclose(p, e / e.sum(), atol=1e-12)


# --- soft-argmax ------------------------------------------------------------


def test_soft_argmax_examples():
    np.testing.assert_array_equal(ops.soft_argmax_2d(delta((8, 8), (2, 5))), [5.0, 2.0])
    np.testing.assert_allclose(ops.soft_argmax_2d(np.full((8, 8), 1 / 64)), [3.5, 3.5], atol=1e-14)
    two = np.zeros((8, 8))
    two[0, 1] = two[0, 3] = 0.5
    np.testing.assert_array_equal(ops.soft_argmax_2d(two), [2.0, 0.0])


def test_soft_argmax_rejects_raw():
    with pytest.raises(PMFContractError):
        ops.soft_argmax_2d(np.ones((4, 4)))
    with pytest.raises(PMFContractError):
        ops.soft_argmax_2d(np.full((2, 2), [[-0.5, 0.5], [0.5, 0.5]]))


def test_soft_argmax_matches_loop(rng):
    for _ in range(10):
        hm = random_pmf(rng, (6, 9))
        np.testing.assert_allclose(ops.soft_argmax_2d(hm), loop_soft_argmax_2d(hm), atol=1e-12)


@given(arrays(np.float64, (5, 7), elements=st.floats(-20, 20)))
def test_soft_argmax_inside_grid(raw):
    mu = ops.soft_argmax_2d(ops.normalize_to_pmf(raw))
    assert -1e-12 <= mu[0] <= 6 + 1e-12
    assert -1e-12 <= mu[1] <= 4 + 1e-12


def test_soft_argmax_backward_is_coord_grid():
    g = ops.soft_argmax_2d_backward((3, 4), np.array([1.0, 0.0]))
    np.testing.assert_array_equal(g, ops.coord_grid("x", (3, 4)))
    g = ops.soft_argmax_2d_backward((3, 4), np.array([0.0, 1.0]))
    np.testing.assert_array_equal(g, ops.coord_grid("y", (3, 4)))


def test_argmax_first_index_ties():
    hm = np.zeros((3, 3))
    hm[1, 2] = hm[2, 0] = 1.0
    np.testing.assert_array_equal(ops.argmax_2d(hm), [2.0, 1.0])


# --- volumes and marginals ---------------------------------------------------------


def test_volumetric_examples():
    np.testing.assert_array_equal(ops.soft_argmax_3d_volumetric(delta((4, 4, 4), (1, 2, 3))), [3, 2, 1])
    np.testing.assert_allclose(ops.soft_argmax_3d_volumetric(np.full((4, 4, 4), 1 / 64)), [1.5] * 3, atol=1e-14)


def test_volumetric_matches_loop(rng):
    vol = random_pmf(rng, (5, 5, 5))
    np.testing.assert_allclose(ops.soft_argmax_3d_volumetric(vol), loop_soft_argmax_3d(vol), atol=1e-12)


def test_marginalize_delta():
    m = ops.marginalize_volume(delta((4, 4, 4), (1, 2, 3)))
    np.testing.assert_array_equal(m.xy, delta((4, 4), (2, 3)))
    np.testing.assert_array_equal(m.zy, delta((4, 4), (2, 1)))
    np.testing.assert_array_equal(m.xz, delta((4, 4), (1, 3)))


def test_marginalize_uniform():
    m = ops.marginalize_volume(np.full((3, 4, 5), 1 / 60))
    np.testing.assert_allclose(m.xy, 1 / 20)
    np.testing.assert_allclose(m.zy, 1 / 12)
    np.testing.assert_allclose(m.xz, 1 / 15)


def test_marginalize_matches_loop(rng):
    vol = random_pmf(rng, (4, 5, 6))
    m = ops.marginalize_volume(vol)
    xy, zy, xz = loop_marginals(vol)
    assert m.zy.shape == (5, 4) and m.xz.shape == (4, 6)
    for a, b in ((m.xy, xy), (m.zy, zy), (m.xz, xz)):
        assert np.abs(a - b).max() < 1e-12


def test_marginal_coords_examples():
    m = ops.marginalize_volume(delta((4, 4, 4), (1, 2, 3)))
    np.testing.assert_array_equal(ops.marginal_coords(m), [3, 2, 1])
    xy = delta((8, 8), (3, 2))
    zy = delta((8, 8), (3, 4))
    xz = delta((8, 8), (6, 2))
    np.testing.assert_array_equal(ops.marginal_coords(MarginalHeatmapSet(xy, zy, xz)), [2.0, 3.0, 5.0])


def test_marginal_set_shape_errors():
    with pytest.raises(ShapeError):
        MarginalHeatmapSet(np.zeros((4, 5)), np.zeros((4, 3)), np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        MarginalHeatmapSet(np.zeros((4, 5)), np.zeros((3, 3)), np.zeros((3, 5)))


@given(
    st.integers(2, 8), st.integers(2, 8), st.integers(2, 8),
    st.integers(0, 2**32 - 1),
)
def test_marginal_path_equals_volumetric(d, h, w, seed):
    rng = np.random.default_rng(seed)
    vol = random_pmf(rng, (d, h, w))
    m = ops.marginalize_volume(vol)
    a = ops.marginal_coords(m)
    b = ops.soft_argmax_3d_volumetric(vol)
    assert np.abs(a - b).max() < 1e-10
    # Rows of the expectation table agree when all marginals share one volume.
    x_from_xz = m.xz.sum(axis=0) @ np.arange(w)
    y_from_zy = m.zy.sum(axis=1) @ np.arange(h)
    z_from_zy = m.zy.sum(axis=0) @ np.arange(d)
    z_from_xz = m.xz.sum(axis=1) @ np.arange(d)
    assert abs(x_from_xz - a[0]) < 1e-10
    assert abs(y_from_zy - a[1]) < 1e-10
    assert abs(z_from_zy - z_from_xz) < 1e-10


def test_marginal_coords_broadcasts(rng):
    vols = np.stack([random_pmf(rng, (3, 4, 5)) for _ in range(6)]).reshape(2, 3, 3, 4, 5)
    m = ops.marginalize_volume(vols)
    out = ops.marginal_coords(m)
    assert out.shape == (2, 3, 3)
    np.testing.assert_allclose(out[1, 2], loop_soft_argmax_3d(vols[1, 2]), atol=1e-12)


# --- divergences -------------------------------------------------------------------


def test_kl_examples(rng):
    p = random_pmf(rng, (8, 8))
    assert ops.kl_divergence(p, p) == pytest.approx(0.0, abs=1e-15)
    assert ops.kl_divergence(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])) == pytest.approx(LN2, abs=1e-15)
    q = random_pmf(rng, (8, 8))
    assert abs(ops.kl_divergence(p, q) - loop_kl(p, q)) < 1e-12


def test_kl_zero_mass_terms():
    p = np.array([[0.0, 1.0]])
    q = np.array([[0.0, 1.0]])
    assert ops.kl_divergence(p, q) == 0.0
    assert np.isfinite(ops.kl_divergence(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]])))


def test_jsd_examples(rng):
    p = random_pmf(rng, (8, 8))
    assert ops.jsd(p, p) == pytest.approx(0.0, abs=1e-15)
    assert ops.jsd(delta((4, 4), (0, 0)), delta((4, 4), (3, 3))) == pytest.approx(LN2, abs=1e-15)
    q = random_pmf(rng, (8, 8))
    assert abs(ops.jsd(p, q) - loop_jsd(p, q)) < 1e-12


def test_jsd_symmetry_100_pairs(rng):
    for _ in range(100):
        p = random_pmf(rng, (6, 6))
        q = random_pmf(rng, (6, 6))
        assert abs(ops.jsd(p, q) - ops.jsd(q, p)) < 1e-12


@given(arrays(np.float64, (2, 5, 5), elements=st.floats(-15, 15)))
def test_jsd_bounds(raw):
    p = ops.normalize_to_pmf(raw)
    v = ops.jsd(p[0], p[1])
    assert -1e-15 <= v <= LN2 + 1e-12


def test_jsd_gradient_vanishes_at_p_eq_q(rng):
    p = random_pmf(rng, (5, 5))
    gp, gq = ops.jsd_backward(p, p)
    np.testing.assert_allclose(gp, 0.0, atol=1e-15)
    np.testing.assert_allclose(gq, 0.0, atol=1e-15)


def test_divergence_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.jsd(np.ones((2, 2)) / 4, np.ones((2, 3)) / 6)


# --- losses ------------------------------------------------------------------------


def test_mse_examples(rng):
    p = random_pmf(rng, (4, 4))
    assert ops.loss_heatmap_mse(p, p) == 0.0
    assert ops.loss_heatmap_mse(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])) == 2.0
    q = random_pmf(rng, (4, 4))
    loop = sum((a - b) ** 2 for a, b in zip(p.ravel(), q.ravel()))
    assert abs(ops.loss_heatmap_mse(p, q) - loop) < 1e-12


def test_l2_examples(rng):
    assert ops.loss_coords_l2([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0
    assert ops.loss_coords_l2([0.0, 0.0, 0.0], [3.0, 4.0, 0.0]) == 5.0
    a, b = rng.normal(size=3), rng.normal(size=3)
    assert ops.loss_coords_l2(a, b) == pytest.approx(math.sqrt(sum((a - b) ** 2)), abs=1e-14)


def _targets(gt, shape=(8, 8, 8), sigma=1.0):
    return ops.gaussian_targets(np.asarray(gt, dtype=float), shape, sigma)


def test_loss_3d_zero_at_targets():
    gt = np.array([3.0, 4.0, 2.5])
    t = _targets(gt)
    assert ops.loss_3d(t, gt, gt, 1.0) == pytest.approx(0.0, abs=1e-15)
    assert ops.loss_3d(t, gt + [3.0, 4.0, 0.0], gt, 1.0) == pytest.approx(5.0, abs=1e-12)


def test_loss_3d_compositional(rng):
    gt = np.array([2.0, 5.0, 3.0])
    pred = MarginalHeatmapSet(random_pmf(rng, (8, 8)), random_pmf(rng, (8, 6)), random_pmf(rng, (6, 8)))
    mu = ops.marginal_coords(pred)
    t = ops.gaussian_targets(gt, (8, 8, 6), 1.0)
    expected = ops.loss_coords_l2(mu, gt) + ops.jsd(pred.xy, t.xy) + ops.jsd(pred.zy, t.zy) + ops.jsd(pred.xz, t.xz)
    assert abs(ops.loss_3d(pred, mu, gt, 1.0) - expected) < 1e-12
    assert ops.loss_3d(pred, mu, gt, 1.0, regularize=False) == pytest.approx(ops.loss_coords_l2(mu, gt))


def test_loss_3d_off_grid_gt_is_truncated_not_error():
    gt = np.array([-2.0, 9.0, 3.0])
    t = _targets(gt)
    assert abs(t.xy.sum() - 1.0) < 1e-12
    assert np.isfinite(ops.loss_3d(t, gt, gt, 1.0))


def test_loss_2d_examples(rng):
    gt = np.array([3.0, 2.0])
    t = ops.render_gaussian_2d(gt, 1.0, (8, 8))
    assert ops.loss_2d(t, gt, gt, 1.0) == pytest.approx(0.0, abs=1e-15)
    assert ops.loss_2d(t, gt + [0.0, 2.0], gt, 1.0) == pytest.approx(2.0, abs=1e-12)
    p = random_pmf(rng, (8, 8))
    mu = ops.soft_argmax_2d(p)
    assert abs(ops.loss_2d(p, mu, gt, 1.0) - (ops.loss_coords_l2(mu, gt) + ops.jsd(p, t))) < 1e-12


@given(st.integers(0, 2**32 - 1))
def test_loss_3d_non_negative(seed):
    rng = np.random.default_rng(seed)
    pred = MarginalHeatmapSet(*(ops.normalize_to_pmf(rng.normal(size=s) * 3) for s in ((6, 6), (6, 6), (6, 6))))
    gt = rng.uniform(-1, 7, size=3)
    assert ops.loss_3d(pred, ops.marginal_coords(pred), gt, 0.75) >= 0.0


def test_loss_head_masks_depth_for_2d_examples(rng):
    n, j, s = 3, 2, 6
    logits = [rng.normal(size=(n, j, s, s)) for _ in range(3)]
    head = ops.MarginalLossHead(1.0)
    hms, mu = head.predict(*logits)
    gt = rng.uniform(1, 4, size=(n, j, 3))
    has_3d = np.array([True, False, True])
    loss = head.forward(hms, mu, gt, has_3d)
    g = head.backward(np.ones(n))
    assert np.all(g.zy[1] == 0.0) and np.all(g.xz[1] == 0.0)
    assert np.any(g.zy[0] != 0.0)
    # The 2D example's loss is exactly loss_2d summed over joints.
    expected = ops.loss_2d(hms.xy[1], mu[1, :, :2], gt[1, :, :2], 1.0).sum()
    assert loss[1] == pytest.approx(expected, abs=1e-12)
    expected3 = ops.loss_3d(MarginalHeatmapSet(hms.xy[0], hms.zy[0], hms.xz[0]), mu[0], gt[0], 1.0).sum()
    assert loss[0] == pytest.approx(expected3, abs=1e-12)


def test_loss_head_backward_before_forward():
    with pytest.raises(StateError):
        ops.MarginalLossHead(1.0).backward(np.ones(1))


# --- memory accounting ---------------------------------------------------------------


@pytest.mark.parametrize("h", [16, 32, 64])
def test_activation_ratio_is_3_over_h(h):
    marginal, volumetric, ratio = ops.activation_memory(17, h)
    assert marginal == 3 * 17 * h * h
    assert volumetric == 17 * h**3
    assert ratio == Fraction(3, h)


def test_default_sigma():
    assert ops.default_sigma(32) == 1.0
    assert ops.default_sigma(64) == 2.0
    assert ops.default_sigma(16) == 0.75
    assert ops.default_sigma(8) == 0.75
