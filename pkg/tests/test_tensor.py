import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vmseg import tensor as T
from vmseg.gradcheck import check_gradients, numeric_grad
from vmseg.tensor import (ConfigurationError, ContractError, DimensionError, NumericError,
                          Tensor)

from conftest import leaf


def grad_of(fn, *leaves):
    for t in leaves:
        t.grad = None
    T.backward(fn())
    return [t.grad for t in leaves]


# --- matmul -----------------------------------------------------------------

def test_matmul_identity_and_hand_example():
    M = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(M)).data, M)
    out = T.matmul(Tensor(M), Tensor(np.array([[0.0], [1.0]])))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_gradient(rng, f64):
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    assert check_gradients(lambda: T.matmul(a, b), [a, b]) < 1e-6


def test_matmul_batched_broadcast_gradient(rng, f64):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    assert check_gradients(lambda: a @ b, [a, b]) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


# --- layer norm -------------------------------------------------------------

def test_layer_norm_constant_input_is_zero():
    x = Tensor(np.full((3, 5), 7.0))
    out = T.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.allclose(out.data, 0.0)


def test_layer_norm_two_values():
    out = T.layer_norm(Tensor(np.array([1.0, 3.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                       eps=1e-12)
    assert np.allclose(out.data, [-1.0, 1.0])


def test_layer_norm_moments(rng):
    x = Tensor(rng.normal(3.0, 5.0, (200, 64)), dtype=np.float64)
    g, b = rng.uniform(0.5, 2, 64), rng.normal(size=64)
    out = T.layer_norm(x, Tensor(g), Tensor(b)).data
    z = (out - b) / g
    assert np.allclose(z.mean(axis=-1), 0, atol=1e-10)
    assert np.allclose(z.var(axis=-1), 1, atol=1e-3)


def test_layer_norm_gradient(rng, f64):
    x, g, b = leaf(rng, 4, 6), leaf(rng, 6), leaf(rng, 6)
    assert check_gradients(lambda: T.layer_norm(x, g, b), [x, g, b]) < 1e-6


def test_layer_norm_bad_params():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.ones(4)))


# --- activations ------------------------------------------------------------

def test_silu_values_and_asymptotes():
    assert T.silu(Tensor(np.array([0.0]))).data[0] == 0.0
    big = T.silu(Tensor(np.array([50.0, -50.0]), dtype=np.float64)).data
    assert big[0] == pytest.approx(50.0)
    assert abs(big[1]) < 1e-18


def test_silu_gradient_at_points(f64):
    x = Tensor(np.array([-2.0, -0.5, 0.5, 2.0]), requires_grad=True)
    assert check_gradients(lambda: T.silu(x), [x]) < 1e-6


@pytest.mark.parametrize("op", [T.sigmoid, T.softplus, T.gelu, T.exp, T.silu])
def test_activation_gradients(op, rng, f64):
    x = leaf(rng, 3, 4, scale=2.0)
    assert check_gradients(lambda: op(x), [x]) < 1e-6


def test_log_and_power_gradients(rng, f64):
    x = leaf(rng, 3, 4, positive=True)
    assert check_gradients(lambda: T.log(x), [x]) < 1e-6
    assert check_gradients(lambda: T.power(x, 1.5), [x]) < 1e-6


def test_relu_gradient_away_from_kink(f64):
    x = Tensor(np.array([-1.5, -0.3, 0.4, 2.0]), requires_grad=True)
    (g,) = grad_of(lambda: T.relu(x).sum(), x)
    assert np.array_equal(g, [0, 0, 1, 1])


def test_sigmoid_is_stable_for_large_inputs():
    out = T.sigmoid(Tensor(np.array([-1000.0, 1000.0]), dtype=np.float64)).data
    assert np.all(np.isfinite(out))
    assert out[0] == 0.0 and out[1] == 1.0


def test_softmax_rows_sum_to_one_and_gradient(rng, f64):
    x = leaf(rng, 3, 5, scale=10.0)
    assert np.allclose(T.softmax(x).data.sum(-1), 1.0)
    assert check_gradients(lambda: T.softmax(x, axis=-1), [x]) < 1e-6


# --- reductions, shapes -----------------------------------------------------

def test_sum_grad_is_ones(rng, f64):
    x = leaf(rng, 3, 4)
    (g,) = grad_of(lambda: x.sum(), x)
    assert np.array_equal(g, np.ones((3, 4)))


def test_half_square_grad_is_identity(rng, f64):
    x = leaf(rng, 5)
    (g,) = grad_of(lambda: (x * x).sum() / 2, x)
    assert np.allclose(g, x.data)


@pytest.mark.parametrize("axis,keep", [(None, False), (0, False), (1, True), ((0, 2), False)])
def test_sum_mean_gradients(axis, keep, rng, f64):
    x = leaf(rng, 2, 3, 4)
    assert check_gradients(lambda: T.sum_(x, axis, keep), [x]) < 1e-6
    assert check_gradients(lambda: T.mean(x, axis, keep), [x]) < 1e-6


def test_shape_op_gradients(rng, f64):
    x, y = leaf(rng, 2, 3, 4), leaf(rng, 2, 3, 4)
    idx = np.array([2, 0, 2, 1])
    assert check_gradients(lambda: T.reshape(x, (6, 4)), [x]) < 1e-6
    assert check_gradients(lambda: T.transpose(x, (2, 0, 1)), [x]) < 1e-6
    assert check_gradients(lambda: x[:, 1:, ::2], [x]) < 1e-6
    assert check_gradients(lambda: T.take(x, idx, axis=1), [x]) < 1e-6
    assert check_gradients(lambda: T.concat([x, y], axis=2), [x, y]) < 1e-6
    assert check_gradients(lambda: T.stack([x, y], axis=0), [x, y]) < 1e-6


def test_take_accumulates_repeated_indices(f64):
    x = Tensor(np.arange(3.0), requires_grad=True)
    (g,) = grad_of(lambda: T.take(x, np.array([0, 0, 2]), axis=0).sum(), x)
    assert np.array_equal(g, [2, 0, 1])


@settings(max_examples=40, deadline=None)
@given(hnp.array_shapes(min_dims=1, max_dims=3, max_side=4), st.integers(0, 3))
def test_broadcast_add_mul_gradients(shape, drop):
    rng = np.random.default_rng(len(shape) * 10 + drop)
    bshape = tuple(1 if i < drop else s for i, s in enumerate(shape))[-max(1, len(shape) - 1):]
    with T.default_dtype(np.float64):
        a, b = leaf(rng, *shape), leaf(rng, *bshape)
        assert check_gradients(lambda: a * b + b, [a, b]) < 1e-6
        assert check_gradients(lambda: a / (b * b + 1.0) - a, [a, b]) < 1e-6


def test_unbroadcast_sums_expanded_axes():
    g = np.ones((2, 3, 4))
    assert np.array_equal(T.unbroadcast(g, (3, 1)), np.full((3, 1), 8.0))
    assert T.unbroadcast(g, ()).shape == ()


def test_shared_subexpression_accumulates(f64):
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    (g,) = grad_of(lambda: y * y + y, x)
    assert g[0] == pytest.approx(4 * 8 + 2 * 2)


# --- depthwise conv ---------------------------------------------------------

def brute_dwconv(x, k, bias=None):
    N, C, H, W = x.shape
    p = k.shape[-1] // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros_like(x)
    for n in range(N):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    out[n, c, i, j] = np.sum(xp[n, c, i:i + k.shape[1], j:j + k.shape[2]] * k[c])
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def test_dwconv_identity_kernel(rng):
    x = rng.normal(size=(2, 3, 5, 6))
    k = np.zeros((3, 3, 3))
    k[:, 1, 1] = 1
    assert np.allclose(T.depthwise_conv2d(Tensor(x), Tensor(k)).data, x)


def test_dwconv_all_ones_interior():
    out = T.depthwise_conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 3, 3)))).data
    assert out[0, 0, 2, 2] == 9
    assert out[0, 0, 0, 0] == 4


@pytest.mark.parametrize("k", [1, 3, 5])
def test_dwconv_matches_brute_force(k, rng):
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(3, k, k))
    b = rng.normal(size=3)
    got = T.depthwise_conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                             Tensor(b, dtype=np.float64)).data
    assert np.allclose(got, brute_dwconv(x, w, b))


def test_dwconv_channels_last_matches(rng):
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(3, 3, 3))
    a = T.depthwise_conv2d(Tensor(x), Tensor(w)).data
    b = T.depthwise_conv2d(Tensor(x.transpose(0, 2, 3, 1)), Tensor(w), channels_last=True).data
    assert np.allclose(a, b.transpose(0, 3, 1, 2), atol=1e-6)


@pytest.mark.parametrize("channels_last", [False, True])
def test_dwconv_gradient(channels_last, rng, f64):
    x, k, b = leaf(rng, 2, 4, 5, 3), leaf(rng, 3, 3, 3), leaf(rng, 3)
    if not channels_last:
        x = leaf(rng, 2, 3, 4, 5)
    fn = lambda: T.depthwise_conv2d(x, k, b, channels_last=channels_last)  # noqa: E731
    assert check_gradients(fn, [x, k, b]) < 1e-5


def test_dwconv_rejects_even_kernel():
    with pytest.raises(ConfigurationError):
        T.depthwise_conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((2, 2, 2))))


def test_dwconv_channel_mismatch():
    with pytest.raises(DimensionError):
        T.depthwise_conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((3, 3, 3))))


# --- engine behaviour -------------------------------------------------------

def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(x * 2)


def test_backward_with_explicit_seed(f64):
    x = Tensor(np.ones(3), requires_grad=True)
    T.backward(x * 3, grad=np.array([1.0, 2.0, 3.0]))
    assert np.array_equal(x.grad, [3, 6, 9])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.exp(x) * 2
    assert y._parents == () and y._backward is None


def test_check_numerics_names_node():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True, dtype=np.float64)
    with T.check_numerics(), np.errstate(divide="ignore"):
        with pytest.raises(NumericError, match="log"):
            T.log(x)


def test_op_counter_counts_matmul_macs():
    with T.count_ops() as c:
        T.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 5))))
    assert c.macs == 2 * 3 * 4 * 5
    assert c.flops == 2 * c.macs + c.ops


def test_uncounted_pauses_counting():
    with T.count_ops() as c:
        with T.uncounted():
            T.exp(Tensor(np.ones(10)))
    assert c.macs == 0 and c.ops == 0


def test_default_dtype_scope():
    with T.default_dtype(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32


def test_float_arrays_keep_their_precision():
    assert Tensor(np.ones(2, dtype=np.float64)).dtype == np.float64
    assert T.as_tensor(np.ones(2), like=Tensor(np.ones(1, dtype=np.float32))).dtype == np.float32


def test_numeric_grad_of_known_function(f64):
    x = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    g = numeric_grad(lambda: T.sum_(x * x * x), x)
    assert np.allclose(g, 3 * x.data ** 2, atol=1e-9)


def test_item_only_for_single_element():
    assert Tensor(np.array([2.5])).item() == 2.5
    with pytest.raises(ContractError):
        Tensor(np.ones(2)).item()
