import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from octaquant import neural as nn
from oracles import adam_scalar, naive_conv, window_max


def T(a, grad=False, dtype=np.float64):
    return nn.Tensor(np.asarray(a, dtype=dtype), requires_grad=grad)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


# --------------------------------------------------------------------------
# conv2d


def test_conv_identity_kernel():
    x = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
    out = nn.conv2d(T(x), T(np.ones((1, 1, 1, 1))), T([0.0]), padding=0)
    np.testing.assert_array_equal(out.data, x)


def test_conv_box_sum():
    out = nn.conv2d(T(np.ones((1, 3, 3))), T(np.ones((1, 1, 3, 3))), T([0.0]), padding=1).data
    assert out[0, 1, 1] == 9
    assert out[0, 0, 0] == out[0, 0, 2] == out[0, 2, 0] == out[0, 2, 2] == 4


def test_conv_matches_naive_loop():
    rng = np.random.default_rng(0)
    for pad in (0, 1, 2):
        x = rng.standard_normal((2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = nn.conv2d(T(x, dtype=np.float32), T(w, dtype=np.float32), T(b, dtype=np.float32), pad).data
        assert out.shape == (3, 5 + 2 * pad - 2, 5 + 2 * pad - 2)
        np.testing.assert_allclose(out, naive_conv(x, w, b, pad), atol=1e-5)


def test_conv_output_extent():
    x = T(np.zeros((1, 7, 9)))
    out = nn.conv2d(x, T(np.zeros((2, 1, 5, 5))), None, padding=1)
    assert out.shape == (2, 7 + 2 - 5 + 1, 9 + 2 - 5 + 1)


def test_conv_channel_mismatch_names_shapes():
    with pytest.raises(nn.ShapeError) as ei:
        nn.conv2d(T(np.zeros((2, 4, 4))), T(np.zeros((1, 3, 3, 3))), None, 1)
    msg = str(ei.value)
    assert "(1, 2, 4, 4)" in msg and "(1, 3, 3, 3)" in msg


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10_000))
def test_conv_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2, 6, 6)).astype(np.float32)
    w = T(rng.standard_normal((3, 2, 3, 3)), dtype=np.float32)
    lhs = nn.conv2d(T(a * x + b * y, dtype=np.float32), w, None, 1).data
    rhs = a * nn.conv2d(T(x, dtype=np.float32), w, None, 1).data + b * nn.conv2d(T(y, dtype=np.float32), w, None, 1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-4)


@pytest.mark.parametrize("pad", [0, 1, 2, 3])
def test_conv_gradients(pad):
    rng = np.random.default_rng(pad)
    xd, wd, bd = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    x, w, b = T(xd, True), T(wd, True), T(bd, True)
    probe = rng.standard_normal((2, 3, 5 + 2 * pad - 2, 5 + 2 * pad - 2))
    (nn.conv2d(x, w, b, pad) * probe).sum().backward()

    def f():
        return float((nn.conv2d(T(xd), T(wd), T(bd), pad).data * probe).sum())

    for ana, arr in ((x.grad, xd), (w.grad, wd), (b.grad, bd)):
        np.testing.assert_allclose(ana, numeric_grad(f, arr), rtol=1e-6, atol=1e-7)


# --------------------------------------------------------------------------
# relu6, pooling, upsampling


@pytest.mark.parametrize("v,expected", [(-2.0, 0.0), (3.5, 3.5), (7.0, 6.0), (0.0, 0.0), (6.0, 6.0)])
def test_relu6_values(v, expected):
    assert nn.relu6(T([v])).data[0] == expected


def test_relu6_gradient_region():
    x = T([-1.0, 0.5, 3.0, 5.9, 6.5], True)
    nn.relu6(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [0, 1, 1, 1, 0])


@given(arrays(np.float32, st.integers(1, 50), elements=st.floats(-100, 100, width=32)))
def test_relu6_idempotent(a):
    once = nn.relu6(T(a, dtype=np.float32)).data
    np.testing.assert_array_equal(nn.relu6(T(once, dtype=np.float32)).data, once)


def test_maxpool_basic():
    out, idx = nn.maxpool2(T([[[1, 2], [3, 4]]]))
    assert out.data.shape == (1, 1, 1) and out.data[0, 0, 0] == 4
    assert idx[0, 0, 0] == 3
    const = nn.maxpool2(T(np.full((2, 4, 6), 5.0)))[0].data
    np.testing.assert_array_equal(const, np.full((2, 2, 3), 5.0))


def test_maxpool_matches_window_scan():
    rng = np.random.default_rng(1)
    for _ in range(10):
        x = rng.standard_normal((1, 8, 8))
        np.testing.assert_array_equal(nn.maxpool2(T(x))[0].data, window_max(x))


def test_maxpool_routes_gradient_to_argmax():
    rng = np.random.default_rng(2)
    xd = rng.standard_normal((2, 4, 4))
    x = T(xd, True)
    out, _ = nn.maxpool2(x)
    g = rng.standard_normal(out.shape)
    (out * g).sum().backward()
    expected = np.zeros_like(xd)
    for c in range(2):
        for i in range(2):
            for j in range(2):
                win = xd[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                r, s = np.unravel_index(win.argmax(), (2, 2))
                expected[c, 2 * i + r, 2 * j + s] = g[c, i, j]
    np.testing.assert_array_equal(x.grad, expected)


def test_maxpool_odd_extent_rejected():
    with pytest.raises(nn.ShapeError):
        nn.maxpool2(T(np.zeros((1, 3, 4))))


def test_upsample_examples():
    np.testing.assert_array_equal(nn.upsample_nearest2(T([[[7.0]]])).data, np.full((1, 2, 2), 7.0))
    checker = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    expected = np.kron(checker[0], np.ones((2, 2)))[None]
    np.testing.assert_array_equal(nn.upsample_nearest2(T(checker)).data, expected)


def test_upsample_gradient_finite_differences():
    rng = np.random.default_rng(3)
    xd = rng.standard_normal((2, 3, 3))
    probe = rng.standard_normal((2, 6, 6))
    x = T(xd, True)
    (nn.upsample_nearest2(x) * probe).sum().backward()
    num = numeric_grad(lambda: float((nn.upsample_nearest2(T(xd)).data * probe).sum()), xd)
    np.testing.assert_allclose(x.grad, num, rtol=1e-6, atol=1e-8)


def test_concat_splits_gradient():
    a, b = T(np.ones((1, 2, 2, 2)), True), T(np.ones((1, 3, 2, 2)), True)
    out = nn.concat([a, b], axis=1)
    assert out.shape == (1, 5, 2, 2)
    w = np.arange(20.0).reshape(1, 5, 2, 2)
    (out * w).sum().backward()
    np.testing.assert_array_equal(a.grad, w[:, :2])
    np.testing.assert_array_equal(b.grad, w[:, 2:])


# --------------------------------------------------------------------------
# batch norm


def _bn(x, training, rm=None, rv=None, gamma=None, beta=None):
    c = x.shape[1]
    rm = np.zeros(c) if rm is None else rm
    rv = np.ones(c) if rv is None else rv
    g = T(np.ones(c) if gamma is None else gamma)
    b = T(np.zeros(c) if beta is None else beta)
    return nn.batchnorm(T(x), g, b, rm, rv, training=training), rm, rv


def test_batchnorm_train_normalizes():
    x = np.random.default_rng(4).normal(3.0, 2.0, (4, 3, 5, 5))
    out, _, _ = _bn(x, True)
    np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1, atol=1e-4)


def test_batchnorm_infer_identity():
    x = np.random.default_rng(5).standard_normal((2, 3, 4, 4))
    out, _, _ = _bn(x, False)
    np.testing.assert_allclose(out.data, x / math.sqrt(1 + 1e-5), rtol=1e-12)
    np.testing.assert_allclose(out.data, x, atol=1e-5 * np.abs(x).max())


def test_batchnorm_matches_direct_statistics():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 2, 4, 5)) * [[[[2.0]], [[0.5]]]] + [[[[1.0]], [[-4.0]]]]
    gamma, beta = rng.standard_normal(2), rng.standard_normal(2)
    rm, rv = rng.standard_normal(2), rng.random(2) + 0.5
    rm0, rv0 = rm.copy(), rv.copy()
    out, rm, rv = _bn(x, True, rm, rv, gamma, beta)
    for c in range(2):
        vals = x[:, c].ravel()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        exp = (x[:, c] - mu) / math.sqrt(var + 1e-5) * gamma[c] + beta[c]
        np.testing.assert_allclose(out.data[:, c], exp, rtol=1e-10, atol=1e-12)
        assert rm[c] == pytest.approx(0.9 * rm0[c] + 0.1 * mu)
        assert rv[c] == pytest.approx(0.9 * rv0[c] + 0.1 * var * len(vals) / (len(vals) - 1))


def test_batchnorm_zero_variance_channel_is_finite():
    out, _, _ = _bn(np.full((2, 1, 3, 3), 4.0), True)
    assert np.all(np.isfinite(out.data)) and np.all(out.data == 0)


def test_batchnorm_train_needs_two_values():
    with pytest.raises(nn.ShapeError):
        _bn(np.zeros((1, 2, 1, 1)), True)


def test_batchnorm_gradients():
    rng = np.random.default_rng(7)
    xd, gd, bd = rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(3), rng.standard_normal(3)
    probe = rng.standard_normal(xd.shape)
    x, g, b = T(xd, True), T(gd, True), T(bd, True)
    (nn.batchnorm(x, g, b, np.zeros(3), np.ones(3), True, update_stats=False) * probe).sum().backward()

    def f():
        return float((nn.batchnorm(T(xd), T(gd), T(bd), np.zeros(3), np.ones(3), True,
                                   update_stats=False).data * probe).sum())

    for ana, arr in ((x.grad, xd), (g.grad, gd), (b.grad, bd)):
        np.testing.assert_allclose(ana, numeric_grad(f, arr), rtol=1e-5, atol=1e-7)


# --------------------------------------------------------------------------
# dropout


def test_dropout_identities():
    x = T(np.random.default_rng(8).standard_normal((3, 4, 4)))
    assert nn.dropout(x, 0.0, 1, True) is x
    assert nn.dropout(x, 0.7, 1, False) is x


def test_dropout_fraction_and_scaling():
    x = T(np.ones(10 ** 6, np.float32), dtype=np.float32)
    out = nn.dropout(x, 0.5, 123, True).data
    dropped = np.mean(out == 0)
    # binomial sd at n=1e6 is 5e-4, so +-0.01 is a 20-sigma band
    assert abs(dropped - 0.5) < 0.01
    assert np.all((out == 0) | (out == 2.0))


def test_dropout_deterministic_under_seed():
    x = T(np.ones((4, 16, 16)))
    a = nn.dropout(x, 0.5, 42, True).data
    b = nn.dropout(x, 0.5, 42, True).data
    c = nn.dropout(x, 0.5, 43, True).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_dropout_rejects_p_one():
    with pytest.raises(ValueError):
        nn.dropout(T([1.0]), 1.0, 0, True)


# --------------------------------------------------------------------------
# loss


def test_cross_entropy_confident_and_uniform():
    t = np.random.default_rng(9).random((5, 5)) > 0.5
    l1 = np.where(t, 20.0, -20.0)
    logits = np.stack([-l1, l1])
    assert float(nn.softmax_cross_entropy(T(logits), t).data) < 1e-3
    assert float(nn.softmax_cross_entropy(T(np.zeros((2, 5, 5))), t).data) == pytest.approx(math.log(2), abs=1e-6)


def test_cross_entropy_matches_direct_formula():
    rng = np.random.default_rng(10)
    logits = rng.standard_normal((3, 2, 4, 4)) * 5
    t = rng.random((3, 4, 4)) > 0.4
    total = 0.0
    for n in range(3):
        for i in range(4):
            for j in range(4):
                a, b = logits[n, 0, i, j], logits[n, 1, i, j]
                p1 = math.exp(b) / (math.exp(a) + math.exp(b))
                total -= math.log(p1 if t[n, i, j] else 1 - p1)
    assert float(nn.softmax_cross_entropy(T(logits), t).data) == pytest.approx(total / 48, rel=1e-12)


def test_cross_entropy_stable_for_huge_logits():
    logits = np.array([[[1e4]], [[-1e4]]])
    assert float(nn.softmax_cross_entropy(T(logits), np.array([[False]])).data) == 0.0


def test_cross_entropy_gradient():
    rng = np.random.default_rng(11)
    ld = rng.standard_normal((2, 2, 3, 3))
    t = rng.random((2, 3, 3)) > 0.5
    lg = T(ld, True)
    nn.softmax_cross_entropy(lg, t).backward()
    num = numeric_grad(lambda: float(nn.softmax_cross_entropy(T(ld), t).data), ld)
    np.testing.assert_allclose(lg.grad, num, rtol=1e-6, atol=1e-9)


def test_cross_entropy_shape_mismatch():
    with pytest.raises(nn.ShapeError):
        nn.softmax_cross_entropy(T(np.zeros((2, 3, 3))), np.zeros((3, 4), bool))


def test_cross_entropy_non_finite_raises():
    with pytest.raises(nn.NonFiniteError):
        nn.softmax_cross_entropy(T(np.full((2, 2, 2), np.nan)), np.zeros((2, 2), bool))


# --------------------------------------------------------------------------
# backward


def test_backward_sum_and_square():
    x = T([1.0, 2.0, 3.0], True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    y = T([1.0, 2.0, 3.0], True)
    (y * y).sum().backward()
    np.testing.assert_array_equal(y.grad, [2, 4, 6])


def test_backward_twice_raises():
    x = T([1.0, 2.0], True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(nn.GraphConsumedError):
        loss.backward()


def test_backward_shared_subexpression_accumulates():
    x = T([3.0], True)
    y = x * x
    (y + y).sum().backward()
    assert x.grad[0] == 12.0


def test_no_graph_without_requires_grad():
    out = nn.relu6(T([1.0]))
    assert not out.requires_grad and out._backward is None


# --------------------------------------------------------------------------
# Adam


def _adam(params, grads, **kw):
    st_ = nn.AdamState(**kw)
    nn.adam_step(params, grads, st_)
    return st_


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    st_ = _adam(p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert st_.step_count == 1


def test_adam_first_step_analytic():
    p = {"w": np.array([0.0])}
    _adam(p, {"w": np.array([1.0])}, learning_rate=0.1, epsilon=1e-8)
    assert p["w"][0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_matches_scalar_reference():
    # minimize (theta - 3)^2 from theta = 0
    expected = adam_scalar(0.0, lambda t: 2 * (t - 3), 5, lr=0.1, eps=1e-5)
    p = {"w": np.array([0.0])}
    st_ = nn.AdamState(learning_rate=0.1, epsilon=1e-5)
    got = []
    for _ in range(5):
        nn.adam_step(p, {"w": 2 * (p["w"] - 3)}, st_)
        got.append(float(p["w"][0]))
    np.testing.assert_allclose(got, expected, rtol=1e-12)
    assert st_.step_count == 5


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e3, 1e3)),
       st.floats(1e-5, 1.0), st.integers(1, 5))
def test_adam_step_size_bound(g, lr, steps):
    p = {"w": np.zeros_like(g)}
    st_ = nn.AdamState(learning_rate=lr, epsilon=1e-8)
    for _ in range(steps):
        before = p["w"].copy()
        nn.adam_step(p, {"w": g}, st_)
        # constant gradient: |m_hat| <= sqrt(v_hat), so each move is at most lr
        assert np.all(np.abs(p["w"] - before) <= lr * (1 + 1e-9))


def test_adam_moments_match_shapes_and_nonfinite_named():
    p = {"a": np.zeros((2, 3)), "b": np.zeros(4)}
    st_ = _adam(p, {"a": np.ones((2, 3))})
    assert st_.first_moment["a"].shape == (2, 3) and st_.second_moment["b"].shape == (4,)
    with pytest.raises(nn.NonFiniteError, match="'b'"):
        nn.adam_step(p, {"b": np.array([0, np.inf, 0, 0.0])}, st_)


def test_adam_shape_mismatch():
    with pytest.raises(nn.ShapeError):
        _adam({"a": np.zeros(3)}, {"a": np.zeros(4)})
