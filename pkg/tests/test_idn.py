import numpy as np
import pytest

from conftest import random_set, small_camera
from dualdeform import ndiff as nd
from dualdeform.encode import time_embed
from dualdeform.errors import StateError
from dualdeform.gscore import GaussianSet, identity_quats
from dualdeform.idn import IDN, DeformationDelta, IDNConfig, apply_delta, delta_dim
from dualdeform.nn import GRUCell
from dualdeform.raster import render
from dualdeform.trainer import Adam

SMALL = IDNConfig(depth=3, width=16, skip=2, gru_hidden=8, pos_bands=2, time_bands=2)


def randomize_heads(net, seed=0, scale=0.1):
    rng = np.random.default_rng(seed)
    for name, p in net.named_parameters():
        if name.startswith("heads."):
            p.data = rng.normal(0.0, scale, size=p.shape)


def test_zero_init_delta():
    net = IDN(rng=np.random.default_rng(0))
    g0 = random_set(5)
    for t in (0, 3, 7):
        d = net.idn_core(g0, time_embed(t, 7))
        for f in d.fields():
            assert np.all(f.data == 0.0)


def test_deterministic():
    net = IDN(SMALL, np.random.default_rng(0))
    randomize_heads(net)
    g0 = random_set(5)
    a = net.idn_core(g0, time_embed(2, 7, SMALL.time_bands)).flatten().data
    b = net.idn_core(g0, time_embed(2, 7, SMALL.time_bands)).flatten().data
    assert np.array_equal(a, b)


def test_uninitialized_raises():
    with pytest.raises(StateError):
        IDN().idn_core(random_set(2), time_embed(0, 3))


def test_rollout_single_step_equals_core():
    net = IDN(SMALL, np.random.default_rng(1))
    randomize_heads(net)
    g0 = random_set(4)
    (h,) = net.rollout_future(g0, 2, 1, 9)
    assert np.array_equal(h.data, net.idn_core(g0, time_embed(2, 9, SMALL.time_bands)).flatten().data)


def test_rollout_zero_init():
    net = IDN(SMALL, np.random.default_rng(1))
    seq = net.rollout_future(random_set(4), 2, 4, 9)
    assert len(seq) == 4
    assert all(np.all(h.data == 0) for h in seq)


def test_random_access_equivalence():
    net = IDN(SMALL, np.random.default_rng(2))
    randomize_heads(net)
    g0 = random_set(6)
    cold = net.idn_deform(g0, 3, 9)
    for t in range(3):
        net.idn_deform(g0, t, 9)
    warm = net.idn_deform(g0, 3, 9)
    assert np.array_equal(cold[1].flatten().data, warm[1].flatten().data)
    assert np.array_equal(cold[2].data, warm[2].data)


def test_batched_frames_match_single():
    net = IDN(SMALL, np.random.default_rng(3))
    randomize_heads(net)
    g0 = random_set(6)
    batched = net.deform_frames(g0, [4, 5], 9, 4)
    for t, (_, d, rep) in zip([4, 5], batched):
        _, d1, rep1 = net.idn_deform(g0, t, 9)
        np.testing.assert_allclose(d.flatten().data, d1.flatten().data, atol=1e-13)
        np.testing.assert_allclose(rep.data, rep1.data, atol=1e-13)


def test_gru_zero_fixed_point():
    cell = GRUCell(5, 7, np.random.default_rng(0))
    h = cell.run([nd.as_tensor(np.zeros((3, 5)))] * 4)
    assert np.all(h.data == 0.0)


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def test_gru_single_step_matches_scalar_cell():
    rng = np.random.default_rng(4)
    cell = GRUCell(3, 2, rng)
    cell.b_x.data = rng.normal(size=6)
    cell.b_h.data = rng.normal(size=6)
    x = rng.normal(size=(1, 3))
    h = cell.run([nd.as_tensor(x)]).data[0]
    Wx, Wh, bx, bh = cell.w_x.data, cell.w_h.data, cell.b_x.data, cell.b_h.data
    ref = []
    for j in range(2):
        r = _sig(sum(x[0, i] * Wx[i, j] for i in range(3)) + bx[j] + bh[j])
        z = _sig(sum(x[0, i] * Wx[i, 2 + j] for i in range(3)) + bx[2 + j] + bh[2 + j])
        n = np.tanh(sum(x[0, i] * Wx[i, 4 + j] for i in range(3)) + bx[4 + j] + r * bh[4 + j])
        ref.append((1 - z) * n)  # previous hidden state is zero
    np.testing.assert_allclose(h, ref, atol=1e-14)


def test_gru_gradient():
    rng = np.random.default_rng(5)
    cell = GRUCell(4, 3, rng)
    seq = [nd.parameter(rng.normal(size=(2, 4))) for _ in range(3)]

    def f(ps):
        return (cell.run(seq) ** 2).sum()

    assert nd.finite_diff_check(f, cell.parameters() + seq) < 1e-4


def test_idn_core_gradient():
    net = IDN(SMALL, np.random.default_rng(6))
    randomize_heads(net, scale=0.3)
    g0 = random_set(3)
    emb = time_embed(1, 4, SMALL.time_bands)
    target = np.random.default_rng(0).normal(size=(3, delta_dim(1)))
    f = lambda ps: ((net.idn_core(g0, emb).flatten() - target) ** 2).sum()
    assert nd.finite_diff_check(f, net.parameters()) < 1e-4


def test_apply_zero_delta_identity():
    g0 = random_set(4)
    g = apply_delta(g0, DeformationDelta.zeros(4, 1))
    for a, b in zip(g.parameters(), g0.parameters()):
        assert np.array_equal(a.data, b.data)


def test_apply_shift_and_render_equivalence():
    g0 = random_set(4, seed=2)
    flat = np.zeros((4, delta_dim(1)))
    flat[1, 0] = 1.0
    g = apply_delta(g0, DeformationDelta.from_flat(flat, 1))
    np.testing.assert_array_equal(g.means.data[1] - g0.means.data[1], [1.0, 0.0, 0.0])
    manual = g0.copy()
    manual.means.data[1] += [1.0, 0.0, 0.0]
    cam = small_camera()
    assert np.array_equal(render(g, cam).color.data, render(manual, cam).color.data)


def test_learns_linear_motion():
    """One Gaussian moving at constant velocity; dx is queried at the unseen midpoint.

    The trajectory is sampled densely so the highest time band is not aliased at t=0.5.
    """
    T = 64
    net = IDN(rng=np.random.default_rng(0))
    g0 = GaussianSet.from_arrays([[0.1, -0.2, 0.3]], identity_quats(1), np.zeros((1, 3)), [0.0],
                                 np.zeros((1, 4, 3)))
    velocity = np.array([0.3, -0.15, 0.05])
    frames = [t for t in range(T + 1) if 2 * t != T]
    embs = [time_embed(t, T) for t in frames]
    opt = Adam()
    named = list(net.named_parameters())
    for _ in range(300):
        for _, p in named:
            p.grad = None
        loss = 0.0
        for t, d in zip(frames, net.core_many(g0, embs)):
            loss = loss + ((d.dx - velocity * (t / T)) ** 2).sum()
        nd.backward(loss, inputs=[p for _, p in named])
        opt.step(named, {n: 1e-4 for n, _ in named})
    pred = net.idn_core(g0, time_embed(T // 2, T)).dx.data[0]
    truth = velocity * 0.5
    assert np.linalg.norm(pred - truth) < 0.05 * np.linalg.norm(truth)
