import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmseg import tensor as T
from vmseg.baselines import (ViTBlockParams, attention, conv2d_valid, image_patches, msa,
                             vit_block, vit_embed)
from vmseg.gradcheck import check_gradients
from vmseg.tensor import ConfigurationError, DimensionError, Tensor

from conftest import leaf


def brute_conv(I, K):
    M, N = I.shape
    m, n = K.shape
    out = np.zeros((M - m + 1, N - n + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = sum(I[i + k, j + l] * K[k, l] for k in range(m) for l in range(n))
    return out


def test_conv_scalar_kernel(rng):
    I = rng.normal(size=(4, 5))
    assert np.allclose(conv2d_valid(I, np.array([[2.5]])).data, 2.5 * I)


def test_conv_hand_sum():
    out = conv2d_valid(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 2)))
    assert out.data.tolist() == [[10.0]]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 4), st.integers(1, 4))
def test_conv_shape_and_brute_force(M, N, m, n):
    if m > M or n > N:
        return
    rng = np.random.default_rng(M * 100 + N * 10 + m + n)
    I, K = rng.normal(size=(M, N)), rng.normal(size=(m, n))
    out = conv2d_valid(Tensor(I, dtype=np.float64), Tensor(K, dtype=np.float64)).data
    assert out.shape == (M - m + 1, N - n + 1)
    assert np.allclose(out, brute_conv(I, K))


def test_conv_errors():
    with pytest.raises(DimensionError):
        conv2d_valid(np.ones((2, 2)), np.ones((3, 1)))
    with pytest.raises(DimensionError):
        conv2d_valid(np.ones((2, 2, 2)), np.ones((1, 1)))


def test_conv_gradient(rng, f64):
    I, K = leaf(rng, 5, 6), leaf(rng, 3, 2)
    assert check_gradients(lambda: conv2d_valid(I, K), [I, K]) < 1e-6


# --- embedding ----------------------------------------------------------------

def test_vit_embed_token_count_and_zero_image(rng):
    E = Tensor(rng.normal(size=(4 * 4 * 3, 8)))
    cls = Tensor(rng.normal(size=8))
    z = vit_embed(np.zeros((3, 8, 12)), 4, E, Tensor(np.zeros((7, 8))), cls).data
    assert z.shape == (7, 8)
    assert np.array_equal(z[0], cls.data) and not z[1:].any()


def test_vit_embed_locality(rng):
    E = Tensor(rng.normal(size=(2 * 2 * 1, 3)), dtype=np.float64)
    zero = np.zeros((1, 4, 4))
    args = (E, Tensor(np.zeros((5, 3))), Tensor(np.zeros(3)))
    img = zero.copy()
    img[0, 3, 0] = 1.0          # patch row 1, column 0 -> token 1 + 2 = 3
    z = vit_embed(img, 2, *args).data
    assert np.flatnonzero(np.any(z != 0, axis=1)).tolist() == [3]


def test_image_patches_order(rng):
    img = np.arange(16.0).reshape(1, 4, 4)
    p = image_patches(Tensor(img), 2).data
    assert p[1].tolist() == [2, 3, 6, 7]


def test_patches_need_divisible_size():
    with pytest.raises(ConfigurationError):
        image_patches(Tensor(np.zeros((1, 5, 4))), 2)


# --- attention -----------------------------------------------------------------

def test_single_token_returns_value(rng):
    V = rng.normal(size=(1, 4))
    assert np.allclose(attention(rng.normal(size=(1, 3)), rng.normal(size=(1, 3)), V).data, V)


def test_orthogonal_query_gives_uniform_weights(rng):
    K = np.zeros((5, 2))
    K[:, 1] = rng.normal(size=5)
    Q = np.array([[1.0, 0.0]])
    V = rng.normal(size=(5, 3))
    out, w = attention(Q, K, V, return_weights=True)
    assert np.allclose(w.data, 0.2) and np.allclose(out.data, V.mean(0))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 6), st.integers(0, 1000))
def test_softmax_rows_normalized(L, d, seed):
    rng = np.random.default_rng(seed)
    _, w = attention(rng.normal(size=(L, d)) * 5, rng.normal(size=(L, d)) * 5,
                     rng.normal(size=(L, d)), return_weights=True)
    assert np.allclose(w.data.sum(-1), 1.0, atol=1e-6)


def test_attention_width_checks():
    with pytest.raises(DimensionError):
        attention(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 4)))


# --- encoder block -------------------------------------------------------------

def test_zero_weights_give_identity(rng):
    p = ViTBlockParams.init(8, heads=2, rng=rng, std=0.0)
    z = rng.normal(size=(5, 8)).astype(np.float32)
    assert np.allclose(vit_block(z, p).data, z)


@pytest.mark.parametrize("shape,heads", [((5, 8), 2), ((2, 3, 8), 4), ((1, 4), 1)])
def test_block_shape(shape, heads, rng):
    p = ViTBlockParams.init(shape[-1], heads=heads, rng=rng)
    assert vit_block(rng.normal(size=shape).astype(np.float32), p).shape == shape


def test_heads_must_divide_width(rng):
    with pytest.raises(ConfigurationError):
        ViTBlockParams.init(6, heads=4, rng=rng)


def test_block_gradient(rng, f64):
    p = ViTBlockParams.init(4, heads=2, mlp_ratio=2, rng=rng, dtype=np.float64, std=0.5)
    z = leaf(rng, 3, 4)
    assert check_gradients(lambda: vit_block(z, p), [z] + p.parameters()) < 1e-4


def test_msa_single_head_equals_attention(rng):
    p = ViTBlockParams.init(4, heads=1, rng=rng, dtype=np.float64, std=0.5)
    z = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    q, k, v = (T.linear(z, l.weight, l.bias) for l in (p.w_q, p.w_k, p.w_v))
    ref = p.w_o(attention(q, k, v)).data
    assert np.allclose(msa(z, p).data, ref)
