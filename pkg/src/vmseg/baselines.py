"""Reference convolution and Vision Transformer cores.

These exist for coverage of the classic building blocks and as the
comparison cores of the complexity model; they are not segmentation models.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module
from .tensor import ConfigurationError, DimensionError, Tensor, record


def conv2d_valid(image, kernel) -> Tensor:
    """Valid 2-D correlation (no kernel flip): O[i,j] = sum_kl I[i+k, j+l] K[k,l]."""
    I, K = T.as_tensor(image), T.as_tensor(kernel)
    if I.ndim != 2 or K.ndim != 2:
        raise DimensionError("conv2d_valid expects 2-D image and kernel")
    M, N = I.shape
    m, n = K.shape
    if m > M or n > N:
        raise DimensionError(f"kernel {K.shape} larger than input {I.shape}")
    windows = np.lib.stride_tricks.sliding_window_view(I.data, (m, n))   # [M-m+1, N-n+1, m, n]
    out = np.einsum("ijkl,kl->ij", windows, K.data)
    record("conv", macs=out.size * m * n)

    def bw(g):
        gI = np.zeros_like(I.data)
        for k in range(m):
            for l in range(n):
                gI[k:k + out.shape[0], l:l + out.shape[1]] += g * K.data[k, l]
        gK = np.einsum("ijkl,ij->kl", windows, g)
        return gI, gK

    return T._make(out, (I, K), bw, "conv2d_valid")


def image_patches(image: Tensor, p: int) -> Tensor:
    """[C, H, W] -> [N, p*p*C] non-overlapping patches in row-major order."""
    C, H, W = image.shape
    if H % p or W % p:
        raise ConfigurationError(f"{H}x{W} image does not divide into {p}x{p} patches")
    x = T.reshape(image, (C, H // p, p, W // p, p))
    x = T.transpose(x, (1, 3, 2, 4, 0))
    return T.reshape(x, ((H // p) * (W // p), p * p * C))


def vit_embed(image, p: int, E: Tensor, E_pos: Tensor, x_class: Tensor) -> Tensor:
    """z0 = [x_class; x_1 E; ...; x_N E] + E_pos, shape [N+1, D]."""
    patches = image_patches(T.as_tensor(image), p)
    tokens = T.matmul(patches, E)
    cls = T.reshape(x_class, (1, -1))
    return T.concat([cls, tokens], axis=0) + E_pos


def attention(Q, K, V, d_k: int | None = None, return_weights: bool = False):
    """SoftMax(Q K^T / sqrt(d_k)) V for [..., L, d] operands."""
    Q, K, V = T.as_tensor(Q), T.as_tensor(K), T.as_tensor(V)
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"query width {Q.shape[-1]} != key width {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"{K.shape[-2]} keys but {V.shape[-2]} values")
    d_k = d_k or Q.shape[-1]
    scores = T.mul(T.matmul(Q, T.transpose(K, _swap_last(K.ndim))), 1.0 / np.sqrt(d_k))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, V)
    return (out, weights) if return_weights else out


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


@dataclass
class ViTBlockParams(Module):
    w_q: Linear
    w_k: Linear
    w_v: Linear
    w_o: Linear
    norm1: LayerNorm
    norm2: LayerNorm
    mlp1: Linear
    mlp2: Linear
    heads: int

    @classmethod
    def init(cls, dim: int, heads: int = 1, mlp_ratio: int = 4, rng=None,
             dtype=np.float32, std: float = 0.02) -> ViTBlockParams:
        if dim % heads:
            raise ConfigurationError(f"width {dim} not divisible by {heads} heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        lin = lambda a, b: Linear(a, b, rng, dtype=dtype, std=std)  # noqa: E731
        return cls(lin(dim, dim), lin(dim, dim), lin(dim, dim), lin(dim, dim),
                   LayerNorm(dim, dtype), LayerNorm(dim, dtype),
                   lin(dim, mlp_ratio * dim), lin(mlp_ratio * dim, dim), heads)

    @property
    def d_k(self) -> int:
        return self.w_q.weight.shape[1] // self.heads


def msa(z: Tensor, p: ViTBlockParams) -> Tensor:
    """Multi-head self-attention: per-head attention, concat, output projection."""
    L, D = z.shape[-2:]
    h, dk = p.heads, p.d_k

    def split(t):
        t = T.reshape(t, z.shape[:-1] + (h, dk))
        nd = t.ndim
        return T.transpose(t, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))

    q, k, v = split(p.w_q(z)), split(p.w_k(z)), split(p.w_v(z))
    o = attention(q, k, v, dk)
    nd = o.ndim
    o = T.transpose(o, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    return p.w_o(T.reshape(o, z.shape))


def vit_block(z, p: ViTBlockParams) -> Tensor:
    """z' = MSA(LN(z)) + z;  out = MLP(LN(z')) + z'."""
    z = T.as_tensor(z)
    if z.shape[-1] != p.norm1.gamma.shape[0]:
        raise DimensionError(f"token width {z.shape[-1]} does not match block")
    z1 = msa(p.norm1(z), p) + z
    return p.mlp2(T.gelu(p.mlp1(p.norm2(z1)))) + z1
