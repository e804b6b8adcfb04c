import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_set
from dualdeform import ndiff as nd
from dualdeform.encode import spatial_pe, time_embed
from dualdeform.errors import ShapeError, StateError
from dualdeform.flowio import make_lift, pair_for_target, synth_embedding
from dualdeform.gmn import FLOW_DIM, GMN, CrossAttention, FlowEmbeddingGrid, GMNConfig, state_features

SMALL = GMNConfig(d_model=8, heads=2, rep_dim=6, drn_depth=2, drn_width=8, pos_bands=2, time_bands=2)


def grid(h, w, seed=0, scale=1.0):
    return FlowEmbeddingGrid(np.random.default_rng(seed).normal(0.0, scale, size=(h, w, FLOW_DIM)), 0, 1)


def randomize_heads(net, seed=0, scale=0.1):
    rng = np.random.default_rng(seed)
    for name, p in net.named_parameters():
        if name.startswith("heads."):
            p.data = rng.normal(0.0, scale, size=p.shape)


def _softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


# -- cross attention

def test_single_token_weight_one():
    attn = CrossAttention(8, 2, np.random.default_rng(0))
    q = np.random.default_rng(1).normal(size=(5, 8))
    tok = np.random.default_rng(2).normal(size=(1, 8))
    out, w = attn(q, tok, return_weights=True)
    assert np.all(w.data == 1.0)
    expected = attn.out(attn.v(tok)).data
    np.testing.assert_allclose(out.data, np.repeat(expected, 5, axis=0), atol=1e-14)


def test_identical_tokens_uniform():
    attn = CrossAttention(8, 2, np.random.default_rng(0))
    q = np.random.default_rng(1).normal(size=(3, 8))
    tok = np.random.default_rng(2).normal(size=(1, 8))
    out, w = attn(q, np.repeat(tok, 6, axis=0), return_weights=True)
    np.testing.assert_allclose(w.data, 1.0 / 6, atol=1e-15)
    np.testing.assert_allclose(out.data, attn(q, tok).data, atol=1e-13)


def test_attention_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    d = 4
    attn = CrossAttention(d, 1, rng)
    for lin in (attn.q, attn.k, attn.v, attn.out):
        lin.bias.data = rng.normal(size=d)
    q = rng.normal(size=(2, d))
    tok = rng.normal(size=(3, d))
    Wq, Wk, Wv, Wo = (l.weight.data for l in (attn.q, attn.k, attn.v, attn.out))
    bq, bk, bv, bo = (l.bias.data for l in (attn.q, attn.k, attn.v, attn.out))
    ref = np.zeros((2, d))
    for i in range(2):
        qi = [sum(q[i, a] * Wq[a, c] for a in range(d)) + bq[c] for c in range(d)]
        keys = [[sum(tok[j, a] * Wk[a, c] for a in range(d)) + bk[c] for c in range(d)] for j in range(3)]
        vals = [[sum(tok[j, a] * Wv[a, c] for a in range(d)) + bv[c] for c in range(d)] for j in range(3)]
        scores = np.array([sum(qi[c] * keys[j][c] for c in range(d)) / np.sqrt(d) for j in range(3)])
        w = _softmax(scores)
        mixed = [sum(w[j] * vals[j][c] for j in range(3)) for c in range(d)]
        ref[i] = [sum(mixed[a] * Wo[a, c] for a in range(d)) + bo[c] for c in range(d)]
    np.testing.assert_allclose(attn(q, tok).data, ref, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 6), st.integers(1, 9))
def test_attention_weights_normalized_and_equivariant(seed, n, m):
    rng = np.random.default_rng(seed)
    attn = CrossAttention(8, 4, rng)
    q = rng.normal(0.0, 2.0, size=(n, 8))
    tok = rng.normal(0.0, 2.0, size=(m, 8))
    out, w = attn(q, tok, return_weights=True)
    assert np.abs(w.data.sum(axis=-1) - 1.0).max() < 1e-12
    perm = rng.permutation(n)
    np.testing.assert_allclose(attn(q[perm], tok).data, out.data[perm], atol=1e-12)


def test_attention_bad_heads():
    with pytest.raises(ShapeError):
        CrossAttention(10, 4, np.random.default_rng(0))


def test_attention_gradient():
    rng = np.random.default_rng(4)
    attn = CrossAttention(6, 2, rng)
    q = nd.parameter(rng.normal(size=(3, 6)))
    tok = nd.parameter(rng.normal(size=(4, 6)))
    target = rng.normal(size=(3, 6))
    f = lambda ps: ((attn(q, tok) - target) ** 2).sum()
    assert nd.finite_diff_check(f, attn.parameters() + [q, tok]) < 1e-4


# -- fusion

def test_uninitialized_raises():
    with pytest.raises(StateError):
        GMN().fuse_flow(grid(2, 2), grid(2, 2), time_embed(0, 3))


def test_fuse_zero_flow_is_pe_plus_time():
    net = GMN(SMALL, np.random.default_rng(0))
    net.fusion.bias.data[:] = 0.0
    z = FlowEmbeddingGrid(np.zeros((3, 4, FLOW_DIM)), 0, 1)
    emb = time_embed(2, 5, SMALL.time_bands)
    m = net.fuse_flow(z, z, emb).data
    expected = spatial_pe(3, 4, 8) + net.time_proj(emb.vector.reshape(1, -1)).data
    np.testing.assert_allclose(m, expected, atol=1e-15)


def test_fuse_token_permutation_roundtrip():
    net = GMN(SMALL, np.random.default_rng(1))
    a, b = grid(3, 3, 1), grid(3, 3, 2)
    emb = time_embed(1, 5, SMALL.time_bands)
    base = net.fuse_flow(a, b, emb).data
    perm = np.random.default_rng(0).permutation(9)
    pa = FlowEmbeddingGrid(a.tokens.reshape(9, -1)[perm].reshape(3, 3, -1), 0, 1)
    pb = FlowEmbeddingGrid(b.tokens.reshape(9, -1)[perm].reshape(3, 3, -1), 0, 1)
    shuffled = net.fuse_flow(pa, pb, emb).data - spatial_pe(3, 3, 8)
    inv = np.argsort(perm)
    np.testing.assert_allclose(shuffled[inv] + spatial_pe(3, 3, 8), base, atol=1e-13)


def test_fuse_shape_default_size():
    net = GMN(GMNConfig(drn_depth=1, drn_width=8), np.random.default_rng(0))
    m = net.fuse_flow(grid(16, 16), grid(16, 16, 1), time_embed(0, 4))
    assert m.shape == (256, 256)


def test_fuse_mismatch_raises():
    net = GMN(SMALL, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        net.fuse_flow(grid(4, 4), grid(4, 3), time_embed(0, 4, SMALL.time_bands))


def test_flow_grid_bad_dim():
    with pytest.raises(ShapeError):
        FlowEmbeddingGrid(np.zeros((2, 2, 64)), 0, 1)


# -- query

def test_query_zero_rep_is_state_only():
    net = GMN(SMALL, np.random.default_rng(0))
    g = random_set(4)
    q = net.build_query(np.zeros((4, 6)), g).data
    expected = net.query_proj(net.state_proj(state_features(g, 2))).data
    np.testing.assert_array_equal(q, expected)


def test_query_identical_inputs():
    net = GMN(SMALL, np.random.default_rng(0))
    g = random_set(1).subset(np.array([0, 0]))
    rep = np.ones((2, 6))
    q = net.build_query(rep, g).data
    np.testing.assert_array_equal(q[0], q[1])


def test_query_gradient_reaches_rep_and_state():
    net = GMN(SMALL, np.random.default_rng(0))
    g = random_set(3, requires_grad=True)
    rep = nd.parameter(np.random.default_rng(1).normal(size=(3, 6)))
    (net.build_query(rep, g) ** 2).sum().backward()
    assert np.abs(rep.grad).max() > 0
    assert np.abs(g.means.grad).max() > 0 and np.abs(g.opacity_logits.grad).max() > 0


# -- refinement and full branch

def test_fresh_gmn_identity():
    net = GMN(SMALL, np.random.default_rng(0))
    g0 = random_set(5)
    emb = time_embed(2, 5, SMALL.time_bands)
    g, delta = net.gmn_deform(g0, emb, emb, None, None, grid(4, 4), grid(4, 4, 1))
    for f in delta.fields():
        assert np.all(f.data == 0.0)
    for a, b in zip(g.parameters(), g0.parameters()):
        assert np.array_equal(a.data, b.data)


def test_drn_deterministic():
    net = GMN(SMALL, np.random.default_rng(0))
    randomize_heads(net)
    g = random_set(4)
    emb = time_embed(1, 5, SMALL.time_bands)
    m = np.random.default_rng(2).normal(size=(4, 8))
    a = net.drn(emb, g, m).flatten().data
    b = net.drn(emb, g, m).flatten().data
    assert np.array_equal(a, b)


def test_drn_gradient():
    net = GMN(SMALL, np.random.default_rng(5))
    randomize_heads(net, scale=0.3)
    g = random_set(3)
    emb = time_embed(1, 5, SMALL.time_bands)
    m = np.random.default_rng(2).normal(size=(3, 8))
    target = np.random.default_rng(3).normal(size=net.drn(emb, g, m).flatten().shape)
    f = lambda ps: ((net.drn(emb, g, m).flatten() - target) ** 2).sum()
    params = [p for name, p in net.named_parameters() if name.startswith(("drn_mlp", "heads"))]
    assert nd.finite_diff_check(f, params) < 1e-4


def test_full_branch_gradient():
    net = GMN(SMALL, np.random.default_rng(6))
    randomize_heads(net, scale=0.3)
    g0 = random_set(3)
    emb = time_embed(1, 5, SMALL.time_bands)
    prev, nxt = grid(2, 2, 1, 0.3), grid(2, 2, 2, 0.3)
    rep = np.random.default_rng(4).normal(size=(3, 6))

    def f(ps):
        _, delta = net.gmn_deform(g0, emb, emb, None, rep, prev, nxt)
        return (delta.flatten() ** 2).sum()

    assert nd.finite_diff_check(f, net.parameters()) < 1e-4


def test_boundary_pairs_duplicate():
    assert pair_for_target(0, 5) == ((0, 1), (0, 1))
    assert pair_for_target(4, 5) == ((3, 4), (3, 4))
    assert pair_for_target(2, 5) == ((1, 2), (2, 3))


def test_boundary_gmn_runs():
    net = GMN(SMALL, np.random.default_rng(0))
    randomize_heads(net)
    lift = make_lift(3)
    flow = np.random.default_rng(0).normal(size=(4, 4, 2))
    nxt = synth_embedding(flow, lift, 0, 1)
    emb = time_embed(0, 4, SMALL.time_bands)
    g, _ = net.gmn_deform(random_set(3), emb, emb, None, None, nxt, nxt)
    assert np.all(np.isfinite(g.means.data))
