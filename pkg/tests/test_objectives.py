import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_set
from dualdeform import ndiff as nd
from dualdeform.errors import DomainError, ShapeError, SizeError
from dualdeform.gscore import GaussianSet, quat_multiply, quat_to_rot, rot_to_quat
from dualdeform.idn import DeformationDelta, delta_dim
from dualdeform.objectives import (DEFAULT_WEIGHTS, OPACITY_MAX, OPACITY_MIN, depth_loss, knn, logit,
                                   mutual_loss, opacity_decay, psnr, render_loss, rigidity_loss,
                                   rigidity_weights, ssim, total_loss)


def reference_ssim(x, y, size=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Scalar-loop SSIM over valid windows of single-channel images."""
    ax = np.arange(size) - (size - 1) / 2.0
    g1 = np.exp(-ax ** 2 / (2 * sigma ** 2))
    win = np.outer(g1, g1)
    win /= win.sum()
    H, W = x.shape
    vals = []
    for i in range(H - size + 1):
        for j in range(W - size + 1):
            px, py = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
            mx, my = (win * px).sum(), (win * py).sum()
            vx = (win * px * px).sum() - mx * mx
            vy = (win * py * py).sum() - my * my
            cxy = (win * px * py).sum() - mx * my
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


# -- photometric

def test_render_loss_identity_and_l1():
    img = np.random.default_rng(0).uniform(size=(12, 12, 3))
    assert render_loss(img, img).item() == 0.0
    a, b = np.full((12, 12, 3), 0.2), np.full((12, 12, 3), 0.7)
    assert render_loss(a, b, 0.0).item() == pytest.approx(0.5, abs=1e-15)


def test_render_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        render_loss(np.zeros((12, 12, 3)), np.zeros((12, 11, 3)))


def test_render_loss_gradient():
    rng = np.random.default_rng(1)
    img = nd.parameter(rng.uniform(0.1, 0.9, size=(12, 13, 3)))
    gt = rng.uniform(size=(12, 13, 3))
    assert nd.finite_diff_check(lambda p: render_loss(p, gt), img) < 1e-4


def test_ssim_self_is_one():
    img = np.random.default_rng(2).uniform(size=(14, 15, 3))
    assert abs(ssim(img, img).item() - 1.0) < 1e-9


def test_ssim_negative_pattern():
    rng = np.random.default_rng(3)
    x = 0.5 + 0.4 * np.sign(rng.normal(size=(12, 12)))
    value = ssim(x, 1.0 - x).item()
    assert value < -0.9
    assert abs(value - reference_ssim(x, 1.0 - x)) < 1e-9


def test_ssim_constant_offset_matches_reference():
    x, y = np.full((12, 12), 0.4), np.full((12, 12), 0.5)
    assert abs(ssim(x, y).item() - reference_ssim(x, y)) < 1e-9


def test_ssim_random_matches_reference():
    rng = np.random.default_rng(4)
    x, y = rng.uniform(size=(13, 12)), rng.uniform(size=(13, 12))
    assert abs(ssim(x, y).item() - reference_ssim(x, y)) < 1e-12


def test_ssim_too_small():
    with pytest.raises(ShapeError):
        ssim(np.zeros((10, 12)), np.zeros((10, 12)))


def test_psnr_examples():
    a = np.full((4, 4, 3), 0.3)
    assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a) == 99.0


# -- depth

def test_depth_affine_invariance():
    gt = np.random.default_rng(5).uniform(size=(9, 7))
    gt = (gt - gt.min()) / (gt.max() - gt.min())
    for a, b in [(1.0, 0.0), (3.7, -2.0), (0.01, 5.0)]:
        assert depth_loss(a * gt + b, gt).item() < 1e-9


def test_depth_ramp_mean():
    ramp = np.tile(np.linspace(0.0, 1.0, 101), (3, 1))
    assert depth_loss(ramp * 4.0 + 1.0, np.zeros_like(ramp)).item() == pytest.approx(0.5, abs=1e-12)


def test_depth_constant_warns(caplog):
    with caplog.at_level(logging.WARNING):
        v = depth_loss(np.full((4, 4), 2.0), np.full((4, 4), 0.25)).item()
    assert v == pytest.approx(0.25)
    assert "constant" in caplog.text


def test_depth_gradient():
    rng = np.random.default_rng(6)
    d = nd.parameter(rng.uniform(1.0, 3.0, size=(6, 6)))
    gt = rng.uniform(size=(6, 6))
    assert nd.finite_diff_check(lambda p: depth_loss(p, gt), d) < 1e-3


# -- knn and rigidity

def test_knn_collinear_tie_break():
    assert knn([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]], 1)[1, 0] == 0


def test_knn_square():
    nb = knn([[0.0, 0, 0], [1.0, 0, 0], [1.0, 1, 0], [0.0, 1, 0]], 2)
    assert [sorted(r) for r in nb.tolist()] == [[1, 3], [0, 2], [1, 3], [0, 2]]


def test_knn_permutation():
    p = np.random.default_rng(7).normal(size=(20, 3))
    perm = np.random.default_rng(8).permutation(20)
    a = knn(p, 4)
    b = knn(p[perm], 4)
    np.testing.assert_array_equal(perm[b], a[perm])


def test_knn_too_few():
    with pytest.raises(SizeError):
        knn(np.zeros((3, 3)), 3)


def _rigid_copy(g, R, shift):
    q = rot_to_quat(R)
    quats = np.stack([quat_multiply(q, gq) for gq in g.quats.data])
    return GaussianSet.from_arrays(g.means.data @ R.T + shift, quats, g.log_scales.data,
                                   g.opacity_logits.data[:, 0], g.sh.data)


def test_rigidity_identity_zero():
    g = random_set(8, spread=0.05)
    nb = knn(g.means.data, 3)
    assert rigidity_loss(g, g, nb, g.means.data).item() < 1e-15  # R R^T is identity up to rounding


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_rigidity_global_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    g = random_set(10, seed=seed, spread=0.05)
    q = rng.normal(size=4)
    R = quat_to_rot(q).data
    moved = _rigid_copy(g, R, rng.normal(size=3))
    nb = knn(g.means.data, 4)
    assert rigidity_loss(g, moved, nb, g.means.data).item() < 1e-9


def test_rigidity_closed_form():
    means = np.array([[0.0, 0.0, 0.0], [0.02, 0.0, 0.0]])
    q = np.tile([1.0, 0, 0, 0], (2, 1))
    g_prev = GaussianSet.from_arrays(means, q, np.zeros((2, 3)), np.zeros(2), np.zeros((2, 4, 3)))
    eps = 0.003
    moved = means.copy()
    moved[1, 1] += eps
    g_curr = GaussianSet.from_arrays(moved, q, np.zeros((2, 3)), np.zeros(2), np.zeros((2, 4, 3)))
    nb = knn(means, 1)
    w = np.exp(-2000.0 * 0.02 ** 2)
    expected = 2 * w * eps / (1 * 2)  # both directed pairs see the same residual
    assert rigidity_loss(g_prev, g_curr, nb, means).item() == pytest.approx(expected, rel=1e-12)
    np.testing.assert_allclose(rigidity_weights(means, nb), [[w], [w]])


def test_rigidity_gradient():
    g_prev = random_set(6, seed=1, spread=0.05)
    g = random_set(6, seed=2, spread=0.05, requires_grad=True)
    nb = knn(g_prev.means.data, 3)

    def f(xs):
        return rigidity_loss(g_prev, GaussianSet(*xs, sh_degree=1), nb, g_prev.means.data, lambda_w=50.0)

    assert nd.finite_diff_check(f, g.parameters()) < 1e-4


# -- mutual learning

def _delta(values, n=1):
    flat = np.zeros((n, delta_dim(1)))
    flat[:, 0] = values
    return DeformationDelta.from_flat(nd.parameter(flat), 1)


def test_mutual_scalar_instance():
    flat_a = nd.parameter(np.zeros((1, delta_dim(1))))
    flat_b = nd.parameter(np.zeros((1, delta_dim(1))))
    flat_a.data[0, 0], flat_b.data[0, 0] = 1.0, 3.0
    a = DeformationDelta.from_flat(flat_a, 1)
    b = DeformationDelta.from_flat(flat_b, 1)
    loss = mutual_loss(a, b, [True])
    assert loss.item() == 8.0
    loss.backward()
    assert flat_b.grad[0, 0] == 4.0 and flat_a.grad[0, 0] == -4.0


def test_mutual_equal_and_empty(caplog):
    d = _delta([0.3, -0.2], 2)
    assert mutual_loss(d, d, [True, True]).item() == 0.0
    with caplog.at_level(logging.WARNING):
        assert mutual_loss(d, _delta([1.0, 1.0], 2), [False, False]).item() == 0.0
    assert "visible" in caplog.text


def test_mutual_routing_by_term():
    rng = np.random.default_rng(9)
    fa = nd.parameter(rng.normal(size=(4, delta_dim(1))))
    fb = nd.parameter(rng.normal(size=(4, delta_dim(1))))
    vis = np.array([True, False, True, True])
    mutual_loss(DeformationDelta.from_flat(fa, 1), DeformationDelta.from_flat(fb, 1), vis).backward()
    expected_a = 2.0 * (fa.data - fb.data) * vis[:, None] / vis.sum()
    np.testing.assert_allclose(fa.grad, expected_a, atol=1e-14)
    np.testing.assert_allclose(fb.grad, -expected_a, atol=1e-14)


# -- opacity

def test_opacity_decay_examples():
    assert nd.sigmoid(opacity_decay(logit(0.5))).item() == pytest.approx(0.499, abs=1e-15)
    np.testing.assert_allclose(opacity_decay(logit(0.5)), logit(0.499), atol=1e-14)
    assert nd.sigmoid(opacity_decay(logit(0.0105))).item() == pytest.approx(0.01, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1.0 - 1e-6), st.integers(0, 1200))
def test_opacity_decay_n_steps(o0, n):
    a = logit(o0)
    for _ in range(n):
        a = opacity_decay(a)
    o = float(nd.sigmoid(a).item())
    expected = min(max(o0 - n * 0.001, OPACITY_MIN), OPACITY_MAX)
    if n == 0:
        expected = o0
    assert abs(o - expected) < 1e-12


# -- total

def test_total_examples():
    assert total_loss({"render": 0.0, "depth": 0.0, "rigid": 0.0, "mutual": 0.0}).total == 0.0
    br = total_loss({"render": 1.0, "depth": 1.0, "rigid": 1.0, "mutual": 1.0})
    assert br.total == pytest.approx(1.3, abs=1e-12)
    assert br.weights == DEFAULT_WEIGHTS


def test_total_bookkeeping():
    parts = {"render": 0.37, "depth": 0.12, "rigid": 3e-3, "mutual": 0.8}
    w = {"render": 1.0, "depth": 0.5, "rigid": 2.0, "mutual": 0.25}
    br = total_loss(parts, w)
    assert abs(br.total - sum(parts[k] * w[k] for k in parts)) < 1e-12
    assert br.row() == [0.37, 0.12, 3e-3, 0.8, br.total]


def test_total_nan_names_part():
    with pytest.raises(DomainError, match="rigid"):
        total_loss({"render": 1.0, "rigid": float("nan")})
