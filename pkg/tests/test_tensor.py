import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from melaseg import gradcheck
from melaseg.tensor import (AdamState, Conv2d, LayerParams, MaxPool, Network, ShapeError, adam_step,
                            conv2d_backward, conv2d_forward, cosine_lr, glorot_uniform, grad_check,
                            leaky_relu, leaky_relu_backward, maxpool2x2_forward, maxunpool2x2, PoolIndices,
                            rel_error, sigmoid, softmax)

from oracles import decimal_sigmoid, naive_conv, naive_pool, scalar_adam


def params(w, b=None):
    w = np.asarray(w, dtype=float)
    return LayerParams(w, np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=float))


# ---------------------------------------------------------------- conv forward

def test_conv_zero_input_gives_zero():
    rng = np.random.default_rng(0)
    out = conv2d_forward(np.zeros((1, 1, 3, 3)), params(rng.normal(size=(2, 1, 3, 3))), pad=1)
    assert out.shape == (1, 2, 3, 3)
    assert not out.any()


def test_conv_identity_kernel():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 1.0
    out = conv2d_forward(x, params(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out, x)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 2, 5, 5))
    p = params(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    got = conv2d_forward(x, p, stride, pad)
    np.testing.assert_allclose(got, naive_conv(x, p.weight, p.bias, stride, pad), rtol=0, atol=1e-12)


def test_conv_output_extent_formula():
    x = np.zeros((2, 3, 64, 64))
    assert conv2d_forward(x, params(np.zeros((4, 3, 3, 3))), 2, 1).shape == (2, 4, 32, 32)
    assert conv2d_forward(x, params(np.zeros((4, 3, 3, 3))), 1, 1).shape == (2, 4, 64, 64)


def test_conv_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        conv2d_forward(np.zeros((1, 2, 5, 5)), params(np.zeros((3, 4, 3, 3))))
    assert "(1, 2, 5, 5)" in str(err.value) and "(3, 4, 3, 3)" in str(err.value)


def test_conv_kernel_must_fit():
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 1, 2, 2)), params(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((1, 1, 4, 4)), params(np.zeros((1, 1, 3, 3))), stride=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linear_in_input(seed, a, b):
    rng = np.random.default_rng(seed)
    p = params(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2))
    x, y = rng.normal(size=(2, 1, 2, 4, 4))
    bias = p.bias[None, :, None, None]
    lhs = conv2d_forward(a * x + b * y, p, 1, 1) - bias
    rhs = a * (conv2d_forward(x, p, 1, 1) - bias) + b * (conv2d_forward(y, p, 1, 1) - bias)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


# ---------------------------------------------------------------- conv backward

def test_conv_backward_zero_upstream():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 5, 5))
    p = params(rng.normal(size=(3, 2, 3, 3)))
    dx, dw, db = conv2d_backward(x, p, np.zeros((1, 3, 5, 5)), 1, 1)
    assert not dx.any() and not dw.any() and not db.any()


def test_conv_backward_1x1_weight_grad_is_position_sum():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 4, 4))
    r = rng.normal(size=(2, 2, 4, 4))
    _, dw, db = conv2d_backward(x, params(rng.normal(size=(2, 3, 1, 1))), r)
    expected = np.einsum("nchw,nohw->oc", x, r)[:, :, None, None]
    np.testing.assert_allclose(dw, expected, atol=1e-12)
    np.testing.assert_allclose(db, r.sum(axis=(0, 2, 3)), atol=1e-12)


def test_conv_backward_rejects_wrong_upstream():
    with pytest.raises(ShapeError):
        conv2d_backward(np.zeros((1, 1, 4, 4)), params(np.zeros((1, 1, 3, 3))), np.zeros((1, 1, 4, 4)))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backward_finite_differences(stride):
    rep = gradcheck.check_conv(7, stride)
    assert rep.passed, rep


def test_conv_backward_skips_input_grad():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 2, 4, 4))
    p = params(rng.normal(size=(2, 2, 3, 3)))
    r = rng.normal(size=(1, 2, 4, 4))
    dx, dw, db = conv2d_backward(x, p, r, 1, 1, input_grad=False)
    _, dw2, db2 = conv2d_backward(x, p, r, 1, 1)
    assert dx is None
    np.testing.assert_array_equal(dw, dw2)
    np.testing.assert_array_equal(db, db2)


def test_glorot_bounds():
    p = glorot_uniform(8, 4, 3, np.random.default_rng(0))
    lim = math.sqrt(6 / (4 * 9 + 8 * 9))
    assert np.abs(p.weight).max() <= lim and not p.bias.any()


# ---------------------------------------------------------------- activations

def test_leaky_relu_examples():
    np.testing.assert_array_equal(leaky_relu(np.array([1.0, -1.0, 0.0])), [1.0, -0.1, 0.0])


def test_leaky_relu_subgradient_at_zero_is_one():
    np.testing.assert_array_equal(leaky_relu_backward(np.array([0.0, -2.0, 3.0]), np.ones(3)), [1.0, 0.1, 1.0])


def test_leaky_relu_finite_differences():
    assert gradcheck.check_leaky_relu(5).passed


def test_sigmoid_and_softmax():
    assert sigmoid(0.0) == 0.5
    np.testing.assert_array_equal(softmax(np.array([2.0, 2.0])), [0.5, 0.5])
    rows = softmax(np.random.default_rng(0).normal(size=(5, 7)) * 30, axis=1)
    np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("x", [-50.0, -20.0, 0.3, 20.0, 50.0])
def test_sigmoid_against_high_precision(x):
    assert sigmoid(np.array(x)) == pytest.approx(decimal_sigmoid(x), rel=1e-13, abs=0)


def test_sigmoid_extremes_finite():
    out = sigmoid(np.array([-1e4, 1e4]))
    assert np.all(np.isfinite(out)) and out[0] >= 0 and out[1] == 1.0


# ---------------------------------------------------------------- pooling

def test_pool_strict_max_and_tie():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out, idx = maxpool2x2_forward(x)
    assert out.item() == 4.0 and idx.offsets.item() == 3
    out, idx = maxpool2x2_forward(np.full((1, 1, 2, 2), 7.0))
    assert out.item() == 7.0 and idx.offsets.item() == 0


def test_pool_matches_scan_oracle():
    x = np.random.default_rng(0).integers(0, 5, size=(2, 3, 6, 6)).astype(float)  # many ties
    out, idx = maxpool2x2_forward(x)
    vals, offs = naive_pool(x)
    np.testing.assert_array_equal(out, vals)
    np.testing.assert_array_equal(idx.offsets, offs)


def test_pool_rejects_odd_extents():
    with pytest.raises(ShapeError):
        maxpool2x2_forward(np.zeros((1, 1, 5, 4)))


def test_unpool_round_trip_and_sparsity():
    rng = np.random.default_rng(1)
    x = rng.permutation(2 * 3 * 6 * 8).reshape(2, 3, 6, 8).astype(float) + 1
    pooled, idx = maxpool2x2_forward(x)
    up = maxunpool2x2(pooled, idx)
    assert np.count_nonzero(up) == pooled.size
    np.testing.assert_array_equal(up[up != 0], x[up != 0])
    assert not maxunpool2x2(np.zeros_like(pooled), idx).any()


def test_unpool_rejects_bad_indices():
    idx = PoolIndices(np.full((1, 1, 1, 1), 4, np.int8), (1, 1, 2, 2))
    with pytest.raises(ShapeError):
        maxunpool2x2(np.ones((1, 1, 1, 1)), idx)
    _, good = maxpool2x2_forward(np.zeros((1, 1, 4, 4)))
    with pytest.raises(ShapeError):
        maxunpool2x2(np.ones((1, 1, 1, 1)), good)


def test_pool_unpool_finite_differences():
    assert gradcheck.check_pool_unpool(3).passed


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient_keeps_params():
    p = params(np.ones((1, 1, 1, 1)))
    st_ = AdamState()
    adam_step([p], st_)
    assert st_.step == 1 and p.weight.item() == 1.0


def test_adam_constant_gradient_descends():
    p = params(np.zeros((1, 1, 1, 1)))
    st_ = AdamState(lr=0.01)
    for _ in range(50):
        p.grad_weight[...] = 2.5
        adam_step([p], st_)
    assert p.weight.item() < 0


def test_adam_matches_scalar_oracle():
    # minimize (theta - 3)^2
    p = params(np.full((1, 1, 1, 1), 0.5))
    st_ = AdamState(lr=0.1)
    traj = []
    for _ in range(3):
        p.grad_weight[...] = 2 * (p.weight - 3.0)
        adam_step([p], st_)
        traj.append(p.weight.item())
    expected = scalar_adam(0.5, [lambda t: 2 * (t - 3.0)] * 3, lr=0.1)
    np.testing.assert_allclose(traj, expected, rtol=0, atol=1e-12)


def test_adam_skips_frozen():
    p = params(np.ones((1, 1, 1, 1)))
    p.frozen = True
    p.grad_weight[...] = 1.0
    adam_step([p], AdamState())
    assert p.weight.item() == 1.0


def test_cosine_schedule_endpoints():
    assert cosine_lr(1e-3, 0, 10) == 1e-3
    assert cosine_lr(1e-3, 0, 10, 0.1) == pytest.approx(1e-3)
    assert cosine_lr(1e-3, 9, 10, 0.1) == pytest.approx(1e-4)


# ---------------------------------------------------------------- gradient checker

def test_rel_error_floor():
    assert rel_error(1e-12, 0.0) == pytest.approx(1e-6)
    assert rel_error(2.0, 1.0) == 0.5


def test_grad_check_flags_wrong_gradient():
    x = np.array([1.0, 2.0])
    rep = grad_check(lambda: float(np.sum(x ** 2)), [(x, np.array([2.0, 5.0]))])
    assert not rep.passed and rep.max_rel_error > 0.1


def test_grad_check_linear_layer():
    assert gradcheck.check_linear(0).max_rel_error < 1e-8


def test_grad_check_conv_stack():
    assert gradcheck.check_conv_stack(2).passed


def test_grad_check_tiny_segmenter():
    assert gradcheck.check_segmenter(1).passed


def test_grad_check_skips_kink_crossings():
    x = np.array([1e-7, 0.5])
    rep = grad_check(lambda: float(np.sum(leaky_relu(x))), [(x, leaky_relu_backward(x, np.ones(2)))],
                     signature=lambda: (x >= 0).tobytes())
    assert rep.skipped == 1 and rep.probes == 1 and rep.passed


# ---------------------------------------------------------------- layers / network

def test_network_frozen_prefix_stops_backward():
    rng = np.random.default_rng(0)
    net = Network()
    net.add("a", Conv2d(1, 2, rng=rng))
    net.add("p", MaxPool())
    net.add("b", Conv2d(2, 1, rng=rng))
    x = rng.normal(size=(1, 1, 4, 4))
    y = net.forward(x)
    assert net.backward(np.ones_like(y)).shape == x.shape
    net.zero_grad()
    net.layers[0][1].params.frozen = True
    net.forward(x)
    assert net.backward(np.ones_like(y)) is None
    assert not net.layers[0][1].params.grad_weight.any()
    assert net.layers[2][1].params.grad_weight.any()


def test_state_dict_round_trip_and_errors():
    rng = np.random.default_rng(0)
    a, b = Network(), Network()
    a.add("c", Conv2d(1, 2, rng=rng))
    b.add("c", Conv2d(1, 2, rng=np.random.default_rng(9)))
    b.load_state_dict(a.state_dict())
    np.testing.assert_array_equal(a.state_dict()["c.weight"], b.state_dict()["c.weight"])
    with pytest.raises(KeyError):
        b.load_state_dict({})
    with pytest.raises(ShapeError):
        b.load_state_dict({"c.weight": np.zeros((3, 1, 3, 3)), "c.bias": np.zeros(3)})


def test_forward_backward_finite_for_finite_input():
    rng = np.random.default_rng(0)
    layer = Conv2d(3, 4, rng=rng)
    y = layer.forward(rng.normal(size=(2, 3, 8, 8)) * 100)
    dx = layer.backward(rng.normal(size=y.shape))
    assert np.all(np.isfinite(y)) and np.all(np.isfinite(dx))
