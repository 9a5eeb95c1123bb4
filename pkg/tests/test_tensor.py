import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focalconvnet import tensor as T
from focalconvnet.errors import ContractError, DimensionError, ShapeError
from focalconvnet.gradcheck import check
from focalconvnet.tensor import Tensor

import oracles


# -- matmul_linear -------------------------------------------------------------
def test_linear_identity():
    out = T.matmul_linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_linear_hand_sum():
    out = T.matmul_linear(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([1.0]))
    np.testing.assert_array_equal(out.data, [[6.0]])


def test_linear_matches_triple_loop(rng):
    x, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
    out = T.matmul_linear(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(out.data, oracles.matmul_loop(x, w, b), atol=1e-12, rtol=0)


def test_linear_over_channel_axis_keeps_nchw(rng):
    x, w, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((3, 6)), rng.standard_normal(6)
    out = T.matmul_linear(Tensor(x), Tensor(w), Tensor(b), axis=1)
    assert out.shape == (2, 6, 4, 5)
    np.testing.assert_allclose(out.data, oracles.pointwise(x, w, b), atol=1e-12)


def test_linear_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul_linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))


# -- conv2d ---------------------------------------------------------------------
def test_conv_1x1_unit_weight_is_identity(rng):
    x = rng.standard_normal((2, 1, 4, 4))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), None, stride=1, pad=0)
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_hand_sum():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), None, pad=0)
    np.testing.assert_array_equal(out.data, [[[[9.0]]]])


@pytest.mark.parametrize("shape,cout,k,stride,pad", [((1, 2, 5, 5), 3, 3, 2, 1), ((2, 3, 6, 4), 2, 3, 1, 1), ((1, 1, 7, 7), 2, 5, 2, 0)])
def test_conv_matches_naive_loops(rng, shape, cout, k, stride, pad):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((cout, shape[1], k, k))
    b = rng.standard_normal(cout)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
    np.testing.assert_allclose(out.data, oracles.conv2d_loop(x, w, b, stride, pad), atol=1e-12, rtol=0)


def test_conv_degenerate_output_raises():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), None, pad=0)


def test_conv_even_kernel_rejected():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


# -- depthwise ----------------------------------------------------------------------
def test_depthwise_center_one_is_identity(rng):
    x = rng.standard_normal((2, 3, 5, 6))
    w = np.zeros((3, 1, 3, 3))
    w[:, 0, 1, 1] = 1.0
    out = T.depthwise_conv2d(Tensor(x), Tensor(w), None, pad=1)
    np.testing.assert_array_equal(out.data, x)


def test_depthwise_constant_interior():
    v = 2.5
    out = T.depthwise_conv2d(Tensor(np.full((1, 2, 5, 5), v)), Tensor(np.ones((2, 1, 3, 3))), None, pad=1)
    np.testing.assert_allclose(out.data[:, :, 1:-1, 1:-1], 9 * v)


@pytest.mark.parametrize("shape,k,stride,pad", [((1, 3, 6, 6), 3, 1, 1), ((2, 2, 7, 5), 3, 2, 1), ((1, 4, 6, 6), 5, 1, 2)])
def test_depthwise_matches_per_channel_loop(rng, shape, k, stride, pad):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((shape[1], 1, k, k))
    b = rng.standard_normal(shape[1])
    out = T.depthwise_conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
    np.testing.assert_allclose(out.data, oracles.depthwise_loop(x, w, b, stride, pad), atol=1e-12, rtol=0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_block_diagonal_conv_equals_depthwise(seed):
    rng = np.random.default_rng(seed)
    c, k = 4, 3
    x = rng.standard_normal((2, c, 6, 6))
    wd = rng.standard_normal((c, 1, k, k))
    full = np.zeros((c, c, k, k))
    for i in range(c):
        full[i, i] = wd[i, 0]
    b = rng.standard_normal(c)
    a = T.conv2d(Tensor(x), Tensor(full), Tensor(b), stride=1, pad=1)
    d = T.depthwise_conv2d(Tensor(x), Tensor(wd), Tensor(b), stride=1, pad=1)
    np.testing.assert_allclose(a.data, d.data, atol=1e-12, rtol=0)


# -- activations -----------------------------------------------------------------
def test_gelu_values():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(T.gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6
    assert abs(T.gelu(Tensor([-10.0])).data[0]) < 1e-6


def test_gelu_is_erf_form_not_tanh(rng):
    x = rng.standard_normal(50) * 3
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, oracles.gelu_np(x), atol=1e-15)


def test_softmax_symmetric_and_normalized(rng):
    np.testing.assert_array_equal(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    s = T.softmax(Tensor(rng.standard_normal((5, 7)) * 50), axis=1).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_and_sigmoid_saturate_without_overflow():
    s = T.softmax(Tensor([1000.0, 0.0])).data
    assert np.isfinite(s).all() and s[0] == 1.0
    sg = T.sigmoid(Tensor([-1000.0, 1000.0])).data
    np.testing.assert_array_equal(sg, [0.0, 1.0])


# -- pooling / mul / norm -------------------------------------------------------------
def test_global_avg_pool():
    np.testing.assert_array_equal(T.global_avg_pool(Tensor(np.full((1, 2, 3, 3), 4.0))).data, np.full((1, 2, 1, 1), 4.0))
    x = np.arange(6.0).reshape(1, 6, 1, 1)
    np.testing.assert_array_equal(T.global_avg_pool(Tensor(x)).data, x)
    assert T.global_avg_pool(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).data.item() == 2.5


def test_elementwise_mul_identities(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(T.mul(Tensor(a), Tensor(np.ones_like(a))).data, a)
    np.testing.assert_array_equal(T.mul(Tensor(a), Tensor(np.zeros_like(a))).data, 0.0)


def test_elementwise_mul_broadcast_vs_tiling(rng):
    a = rng.standard_normal((2, 3, 4, 5))
    g = rng.standard_normal((2, 3, 1, 1))
    tiled = np.tile(g, (1, 1, 4, 5))
    np.testing.assert_array_equal(T.mul(Tensor(g), Tensor(a)).data, tiled * a)


def test_elementwise_mul_bad_broadcast():
    with pytest.raises(DimensionError):
        T.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


def test_layer_norm_constant_gives_beta():
    beta = np.array([0.3, -0.2, 0.5])
    out = T.layer_norm(Tensor(np.full((1, 3), 7.0)), Tensor(np.ones(3)), Tensor(beta))
    np.testing.assert_allclose(out.data[0], beta, atol=1e-12)


def test_layer_norm_pm_one():
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-5)
    np.testing.assert_allclose(out.data[0], np.array([1.0, -1.0]) / np.sqrt(1 + 1e-5), atol=1e-15)


def test_layer_norm_vs_two_pass(rng):
    v, g, b = rng.standard_normal(9), rng.standard_normal(9), rng.standard_normal(9)
    out = T.layer_norm(Tensor(v[None]), Tensor(g), Tensor(b))
    np.testing.assert_allclose(out.data[0], oracles.layer_norm_two_pass(v, g, b), atol=1e-12)


def test_layer_norm_channel_axis_of_nchw(rng):
    x = rng.standard_normal((2, 5, 3, 3))
    g, b = rng.standard_normal(5), rng.standard_normal(5)
    out = T.layer_norm(Tensor(x), Tensor(g), Tensor(b), axis=1)
    np.testing.assert_allclose(out.data, oracles.ln_channels(x, g, b), atol=1e-12)


# -- autodiff ------------------------------------------------------------------------
def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_square_gives_2x(rng):
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_accumulates_over_fan_out():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * 3.0
    (y + y + x).sum().backward()
    np.testing.assert_array_equal(x.grad, [7.0, 7.0])


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_deep_chain_has_no_recursion_limit():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 0.0
    y.sum().backward()
    assert x.grad[0] == 1.0


def test_forward_is_deterministic(rng):
    x, w = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w), pad=1).data
    b = T.conv2d(Tensor(x.copy()), Tensor(w.copy()), pad=1).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize(
    "name,fn,shapes",
    [
        ("slice", lambda x: T.slice_axis(x, 1, 3, axis=1), [(2, 4, 3)]),
        ("expand", lambda x: T.expand(x, (2, 3, 4, 4)), [(2, 3, 1, 1)]),
        ("log_softmax", lambda x: T.log_softmax(x, axis=1), [(3, 5)]),
        ("mean", lambda x: T.mean(x, axis=(0, 2)), [(2, 3, 4)]),
        ("sub", T.sub, [(3, 1), (1, 4)]),
    ],
)
def test_helper_op_gradients(rng, name, fn, shapes):
    assert check(fn, [rng.standard_normal(s) for s in shapes]) < 1e-4


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2),
    c=st.integers(1, 3),
    h=st.integers(3, 7),
    stride=st.integers(1, 2),
    seed=st.integers(0, 2**16),
)
def test_conv_property_matches_loop(n, c, h, stride, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, h, h))
    w = r.standard_normal((2, c, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=stride, pad=1)
    np.testing.assert_allclose(out.data, oracles.conv2d_loop(x, w, None, stride, 1), atol=1e-12)
