import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualdeform import ndiff as nd
from dualdeform.errors import DomainError, FormatError, ShapeError


def rand(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def test_sigmoid_zero():
    assert nd.sigmoid(0.0).item() == 0.5


def test_add_vectors():
    np.testing.assert_array_equal(nd.add([1, 2], [3, 4]).data, [4, 6])


def test_sigmoid_derivative_at_zero():
    x = nd.parameter(0.0)
    nd.sigmoid(x).backward()
    assert x.grad == pytest.approx(0.25, abs=1e-15)
    eps = 1e-5
    s = lambda v: 1.0 / (1.0 + np.exp(-v))
    fd = (s(eps) - s(-eps)) / (2 * eps)
    assert abs(x.grad - fd) < 1e-8


def test_broadcast_mismatch_raises():
    with pytest.raises(ShapeError):
        nd.add(np.ones((2, 3)), np.ones((2, 2)))


def test_log_nonpositive_raises():
    with pytest.raises(DomainError):
        nd.log(np.array([1.0, 0.0]))


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div", "exp", "log",
                                  "sigmoid", "tanh", "relu", "clampST"])
def test_elementwise_gradients(kind):
    for seed in range(10):
        a = nd.Tensor(np.abs(rand(3, 4, seed=seed)) + 0.5)
        b = nd.Tensor(np.abs(rand(4, seed=seed + 100)) + 0.5)
        if kind == "relu":
            a = nd.Tensor(rand(3, 4, seed=seed) + np.sign(rand(3, 4, seed=seed)) * 0.1)

        def f(xs):
            out = nd.op_elementwise(xs[0], xs[1], kind=kind, lo=0.7, hi=1.3)
            return (out * out).sum()

        assert nd.finite_diff_check(f, [a, b]) < 1e-4


def test_clamp_st_passes_gradient_inside_only():
    x = nd.parameter([-2.0, 0.5, 2.0])
    nd.clamp_st(x, -1.0, 1.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(nd.clamp_st(x, -1, 1).data, [-1.0, 0.5, 1.0])


def test_matmul_identity_and_small():
    m = rand(3, 4)
    np.testing.assert_array_equal(nd.matmul(np.eye(3), m).data, m)
    assert nd.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_gradient():
    a, b = nd.Tensor(rand(4, 5, seed=1)), nd.Tensor(rand(5, 3, seed=2))
    err = nd.finite_diff_check(lambda xs: (nd.matmul(xs[0], xs[1]) ** 2).sum(), [a, b])
    assert err < 1e-6


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        nd.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(nd.softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3, atol=1e-15)
    out = nd.softmax([1000.0, 0.0]).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)


def test_softmax_jacobian():
    x = nd.Tensor(rand(6, seed=3))
    w = rand(6, seed=4)
    assert nd.finite_diff_check(lambda v: (nd.softmax(v) * w).sum(), x) < 1e-5


def test_softmax_nan_raises():
    with pytest.raises(DomainError):
        nd.softmax([0.0, np.nan])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(-1e3, 1e3)))
def test_softmax_sums_to_one(x):
    out = nd.softmax(x).data
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.all(out >= 0)


def test_reductions():
    assert nd.sum([1.0, 2.0, 3.0]).item() == 6.0
    assert nd.mean(np.full((3, 4), 2.5)).item() == 2.5
    x = nd.parameter([3.0, 4.0])
    nd.l2norm(x).backward()
    np.testing.assert_allclose(x.grad, [0.6, 0.8], atol=1e-15)
    assert nd.finite_diff_check(lambda v: nd.l2norm(v), nd.Tensor([3.0, 4.0])) < 1e-9


def test_min_max_route_to_first_extremum():
    x = nd.parameter([1.0, 5.0, 5.0, -2.0, -2.0])
    (nd.max(x) + 2.0 * nd.min(x)).backward()
    np.testing.assert_array_equal(x.grad, [0, 1, 0, 2, 0])


def test_reduction_gradients_axes():
    x = nd.Tensor(rand(3, 4, seed=5))
    for kind in ["sum", "mean", "min", "max", "L2norm"]:
        err = nd.finite_diff_check(lambda v: (nd.op_reduce(v, kind, axis=1) ** 2).sum(), x)
        assert err < 1e-4, kind


def test_empty_reduction_raises():
    with pytest.raises(ShapeError):
        nd.sum(np.zeros((0, 3)), axis=0)
    with pytest.raises(ShapeError):
        nd.max(np.zeros((0,)))


def test_concat_slice_roundtrip():
    a, b = rand(2, 3, seed=6), rand(2, 5, seed=7)
    c = nd.concat([a, b], axis=1)
    assert c.shape == (2, 8)
    np.testing.assert_array_equal(nd.slice_(c, 1, 0, 3).data, a)
    np.testing.assert_array_equal(nd.slice_(c, 1, 3, 8).data, b)


def test_concat_gradient_and_mismatch():
    a, b = nd.parameter(rand(2, 3)), nd.parameter(rand(2, 5))
    nd.concat([a, b], axis=1).sum().backward()
    np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
    with pytest.raises(ShapeError):
        nd.concat([np.ones((2, 3)), np.ones((3, 3))], axis=1)


def test_stop_gradient():
    x = nd.parameter(rand(4))
    y = nd.parameter(rand(4, seed=1))
    np.testing.assert_array_equal(nd.stop_gradient(x).data, x.data)
    (nd.stop_gradient(x) * y).sum().backward(inputs=None)
    nd.backward(nd.sum(nd.stop_gradient(x)), inputs=[x])
    np.testing.assert_array_equal(x.grad, np.zeros(4))
    np.testing.assert_array_equal(y.grad, x.data)


def test_backward_basics():
    x = nd.parameter(2.0)
    x.backward()
    assert x.grad == 1.0
    v = nd.parameter([1.0, -2.0, 3.0])
    (v * v).sum().backward()
    np.testing.assert_array_equal(v.grad, [2.0, -4.0, 6.0])
    (v * v).sum().backward()
    np.testing.assert_array_equal(v.grad, [4.0, -8.0, 12.0])


def test_backward_non_scalar_raises():
    with pytest.raises(ShapeError):
        nd.parameter([1.0, 2.0]).backward()


def test_unreached_leaf_gets_zero_grad():
    x, z = nd.parameter([1.0]), nd.parameter([5.0])
    nd.backward((x * 3.0).sum(), inputs=[x, z])
    np.testing.assert_array_equal(z.grad, [0.0])


def test_three_layer_mlp_gradients():
    rng = np.random.default_rng(11)
    params = [nd.Tensor(rng.normal(size=s) * 0.5) for s in [(4, 6), (6,), (6, 5), (5,), (5, 1), (1,)]]
    x = rng.normal(size=(7, 4))

    def f(ps):
        h = nd.tanh(nd.matmul(x, ps[0]) + ps[1])
        h = nd.sigmoid(nd.matmul(h, ps[2]) + ps[3])
        return (nd.matmul(h, ps[4]) + ps[5]).sum()

    assert nd.finite_diff_check(f, params) < 1e-4


def test_finite_diff_check_examples():
    x = nd.Tensor(rand(5))
    assert nd.finite_diff_check(lambda v: nd.sum(v), x) < 1e-10
    assert nd.finite_diff_check(lambda v: nd.sum(nd.sigmoid(v)), x) < 1e-7


def test_flg4_roundtrip(tmp_path):
    a = rand(2, 3, 4).astype(np.float32).astype(np.float64)
    nd.write_flg4(tmp_path / "a.flg4", a)
    back = nd.read_flg4(tmp_path / "a.flg4")
    np.testing.assert_array_equal(back, a)
    raw = (tmp_path / "a.flg4").read_bytes()
    assert raw[:4] == b"FLG4"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 3
    assert len(raw) == 12 + 3 * 8 + 24 * 4


def test_flg4_double_and_bad_magic(tmp_path):
    a = rand(5)
    nd.write_flg4(tmp_path / "b.flg4", a, version=2)
    np.testing.assert_array_equal(nd.read_flg4(tmp_path / "b.flg4"), a)
    (tmp_path / "c.flg4").write_bytes(b"FLG5" + bytes(20))
    with pytest.raises(FormatError):
        nd.read_flg4(tmp_path / "c.flg4")
