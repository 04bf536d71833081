"""Selective state-space scan (S6).

Two realizations of the same linear time-varying system

    h_k = exp(dt_k * A) * h_{k-1} + Bbar_k * x_k
    y_k = <C_k, h_k> + D * x_k

are provided: :func:`scan_recurrence` (sequential in k, differentiable, the
one the network uses) and :func:`scan_matrix_form` (the masked
query/key/value product, an independent check of the recurrence).

Shapes follow the single-sequence convention ``x: [L, d]``, ``B, C: [L, H]``,
``A: [d, H]`` with any number of leading batch axes in front.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConfigurationError,
    ContractError,
    DimensionError,
    Tensor,
    _make,
    as_tensor,
    exp,
    linear,
    mul,
    record,
    reshape,
    softplus,
    unbroadcast,
    uncounted,
)

SERIES_EPS = 1e-6
MODES = ("exact", "simplified")


@dataclass
class ScanInputs:
    x: Tensor
    delta: Tensor
    B: Tensor
    C: Tensor
    h0: Tensor | None = None

    def __post_init__(self):
        self.x, self.delta = as_tensor(self.x), as_tensor(self.delta)
        self.B, self.C = as_tensor(self.B), as_tensor(self.C)
        if self.h0 is not None:
            self.h0 = as_tensor(self.h0)
        L = self.x.shape[-2]
        for name in ("delta", "B", "C"):
            t = getattr(self, name)
            if t.ndim < 2 or t.shape[-2] != L:
                raise DimensionError(f"{name} has length {t.shape[-2:]} but x has L={L}")
        if self.delta.shape != self.x.shape:
            raise DimensionError(f"delta {self.delta.shape} must match x {self.x.shape}")
        if self.B.shape != self.C.shape:
            raise DimensionError(f"B {self.B.shape} and C {self.C.shape} differ")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigurationError(f"unknown discretization mode {mode!r}")


def _bbar_factor(dA: np.ndarray, delta: np.ndarray, A: np.ndarray) -> np.ndarray:
    """(exp(dt*A) - 1) / A, with the series limit dt where |dt*A| is tiny."""
    small = np.abs(dA) < SERIES_EPS
    safe_A = np.where(small, 1.0, A)
    return np.where(small, delta, np.expm1(dA) / safe_A)


def discretize(delta, A, B, mode: str = "exact"):
    """Zero-order-hold discretization for one step.

    ``delta`` is [d] (or [..., d]), ``A`` is [d, H], ``B`` is [H] (or [..., H]).
    Returns ``(Abar, Bbar)`` of shape [..., d, H].
    """
    _check_mode(mode)
    delta = np.asarray(getattr(delta, "data", delta))
    A = np.asarray(getattr(A, "data", A))
    B = np.asarray(getattr(B, "data", B))
    if np.any(delta <= 0):
        raise ContractError("time steps must be strictly positive")
    dA = delta[..., :, None] * A
    Abar = np.exp(dA)
    if mode == "simplified":
        Bbar = delta[..., :, None] * B[..., None, :]
    else:
        Bbar = _bbar_factor(dA, delta[..., :, None], A) * B[..., None, :]
    return Abar, Bbar


def cumulative_weights(delta, A) -> np.ndarray:
    """w_i = prod_{t<=i} exp(A * delta_t), shape [..., L, d, H]."""
    delta = np.asarray(getattr(delta, "data", delta))
    A = np.asarray(getattr(A, "data", A))
    if np.any(delta <= 0):
        raise ContractError("time steps must be strictly positive")
    return np.cumprod(np.exp(delta[..., :, :, None] * A[..., None, :, :]), axis=-3)


# ---------------------------------------------------------------------------
# recurrence


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                   D: Tensor | None = None, h0: Tensor | None = None,
                   mode: str = "exact", return_state: bool = False):
    """Fused differentiable scan.

    x, delta: [..., L, d]; B, C: [..., L, H]; A: [..., d, H]; D: [..., d];
    h0: [..., d, H].  Leading axes of A, D, h0 broadcast against those of x.
    """
    _check_mode(mode)
    x, delta, A, B, C = (as_tensor(t) for t in (x, delta, A, B, C))
    xd, dd, Ad, Bd, Cd = x.data, delta.data, A.data, B.data, C.data
    if np.any(dd <= 0):
        raise ContractError("time steps must be strictly positive")
    L, d = xd.shape[-2:]
    H = Ad.shape[-1]
    if Ad.shape[-2] != d or Bd.shape[-1] != H or Cd.shape[-1] != H:
        raise DimensionError(f"A {Ad.shape}, B {Bd.shape}, C {Cd.shape} inconsistent with d={d}")
    if dd.shape != xd.shape or Bd.shape[-2] != L or Cd.shape[-2] != L:
        raise DimensionError("sequence tensors must share length L")

    Aex = Ad[..., None, :, :]                      # [..., 1, d, H]
    dA = dd[..., :, :, None] * Aex                 # [..., L, d, H]
    Abar = np.exp(dA)
    if mode == "simplified":
        fac = np.broadcast_to(dd[..., None], dA.shape)
    else:
        fac = _bbar_factor(dA, dd[..., None], Aex)
    Bbar = fac * Bd[..., :, None, :]
    u = Bbar * xd[..., None]                       # input injection per step

    batch = np.broadcast_shapes(dA.shape[:-3], () if h0 is None else h0.shape[:-2])
    h = np.zeros(batch + (d, H), dtype=xd.dtype)
    if h0 is not None:
        h = h + h0.data
    hs = np.empty(batch + (L, d, H), dtype=xd.dtype)
    hprev0 = h.copy()
    for k in range(L):
        h = Abar[..., k, :, :] * h + u[..., k, :, :]
        hs[..., k, :, :] = h
    y = np.einsum("...ldh,...lh->...ld", hs, Cd)
    if D is not None:
        y = y + D.data[..., None, :] * xd
    y = y.astype(xd.dtype, copy=False)

    n = int(np.prod(y.shape[:-2])) if y.ndim > 2 else 1
    cells = n * L * d * H
    extra = 2 if mode == "exact" else 0
    record("scan", macs=2 * cells + (n * L * d if D is not None else 0), ops=(4 + extra) * cells)

    parents = [x, delta, A, B, C]
    if D is not None:
        parents.append(D)
    if h0 is not None:
        parents.append(h0)

    def bw(gy):
        gC = np.einsum("...ld,...ldh->...lh", gy, hs)
        G = gy[..., :, :, None] * Cd[..., :, None, :]
        carry = np.zeros_like(h)
        for k in range(L - 1, -1, -1):
            carry = carry + G[..., k, :, :]
            G[..., k, :, :] = carry
            carry = carry * Abar[..., k, :, :]
        gh0 = carry
        hprev = np.concatenate([np.broadcast_to(hprev0[..., None, :, :], batch + (1, d, H)),
                                hs[..., :-1, :, :]], axis=-3)
        gdA = G * hprev * Abar
        gu = G
        gx = (gu * Bbar).sum(-1)
        gBbar = gu * xd[..., None]
        gB = (gBbar * fac).sum(-2)
        gfac = gBbar * Bd[..., :, None, :]
        gdelta = (gdA * Aex).sum(-1)
        gA_full = gdA * dd[..., :, :, None]
        if mode == "simplified":
            gdelta = gdelta + gfac.sum(-1)
        else:
            small = np.abs(dA) < 1e-4
            safe_A = np.where(small, 1.0, Aex)
            dfac_ddelta = Abar
            dfac_dA = np.where(small,
                               dd[..., None] ** 2 * (0.5 + dA / 3.0),
                               (dA * Abar - np.expm1(dA)) / (safe_A * safe_A))
            gdelta = gdelta + (gfac * dfac_ddelta).sum(-1)
            gA_full = gA_full + gfac * dfac_dA
        gA = unbroadcast(gA_full.sum(-3), Ad.shape)
        out = [unbroadcast(gx, xd.shape), unbroadcast(gdelta, dd.shape), gA,
               unbroadcast(gB, Bd.shape), unbroadcast(gC, Cd.shape)]
        if D is not None:
            gx_skip = gy * D.data[..., None, :]
            out[0] = out[0] + unbroadcast(gx_skip, xd.shape)
            out.append(unbroadcast((gy * xd).sum(-2), D.shape))
        if h0 is not None:
            out.append(unbroadcast(gh0, h0.shape))
        return tuple(out)

    y_t = _make(y, parents, bw, "selective_scan")
    if not return_state:
        return y_t
    # the final state is exposed as a value; gradients flow through y only
    return y_t, Tensor(hs[..., -1, :, :].copy())


def scan_recurrence(inp: ScanInputs, A, D=None, mode: str = "exact"):
    """Run the recurrence; returns ``(y [.., L, d], h_L [.., d, H])``."""
    return selective_scan(inp.x, inp.delta, as_tensor(A), inp.B, inp.C,
                          None if D is None else as_tensor(D), inp.h0,
                          mode=mode, return_state=True)


# ---------------------------------------------------------------------------
# matrix (linear-attention) form

MASKED_MAX_L = 256


def _matrix_form_chunk(x, delta, A, B, C, h0):
    """One chunk of the masked product; arrays are single-sequence numpy."""
    L, d = x.shape
    logw = np.cumsum(delta[:, :, None] * A[None], axis=0)          # [L, d, H]
    # the ratio w_i / w_t is invariant to rescaling w per (j, n); centring
    # the log-range keeps both factors representable
    centre = 0.5 * (logw.max(axis=0) + logw.min(axis=0))
    w_scaled = np.exp(logw - centre)
    w = np.exp(logw)
    V = x * delta                                                   # [L, d]
    K, Q = B, C                                                     # [L, H]
    M = np.tril(np.ones((L, L), dtype=x.dtype))
    Y = np.empty_like(x)
    for j in range(d):
        qw = Q * w_scaled[:, j, :]
        kw = K / w_scaled[:, j, :]
        att = (qw @ kw.T) * M
        Y[:, j] = (Q * w[:, j, :]) @ h0[j] + att @ V[:, j]
    # carry for the next chunk: h_b = w_L * h_a + sum_i (w_L / w_i) K_i^T V_i
    ratio = np.exp(logw[-1][None] - logw)                           # [L, d, H]
    h_last = w[-1] * h0 + np.einsum("ldh,lh,ld->dh", ratio, K, V)
    return Y, h_last


def scan_matrix_form(inp: ScanInputs, A, mode: str = "simplified",
                     chunk: int = MASKED_MAX_L) -> Tensor:
    """Masked query/key/value evaluation of the simplified-mode scan.

    Queries are C, keys are B, values are x * delta and the causal decay is
    carried by the cumulative weights.  Sequences longer than ``chunk`` are
    split; each chunk uses the literal masked product and hands its final
    state to the next as the initial state.  No skip term (D) is included.
    """
    if mode != "simplified":
        raise ConfigurationError("matrix form supports only simplified discretization")
    x, delta = inp.x.data, inp.delta.data
    B, C = inp.B.data, inp.C.data
    Ad = np.asarray(getattr(A, "data", A), dtype=x.dtype)
    if np.any(delta <= 0):
        raise ContractError("time steps must be strictly positive")
    L, d = x.shape[-2:]
    H = Ad.shape[-1]
    lead = x.shape[:-2]
    h0 = np.zeros(lead + (d, H), dtype=x.dtype) if inp.h0 is None else \
        np.broadcast_to(inp.h0.data, lead + (d, H))
    Ab = np.broadcast_to(Ad, lead + (d, H))
    out = np.empty_like(x)
    for idx in np.ndindex(*lead):
        h = np.array(h0[idx])
        for s in range(0, L, chunk):
            e = min(s + chunk, L)
            out[idx + (slice(s, e),)], h = _matrix_form_chunk(
                x[idx][s:e], delta[idx][s:e], Ab[idx], B[idx][s:e], C[idx][s:e], h)
    n = int(np.prod(lead)) if lead else 1
    record("scan_matrix", macs=n * d * L * L * (H + 1))
    return Tensor(out)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ScanParams:
    """Trainable pieces of an S6 layer, optionally stacked over a leading
    ``routes`` axis so several independent scans run in one call."""

    a_log: Tensor        # [..., d, H]; A = -exp(a_log)
    D: Tensor            # [..., d]
    w_B: Tensor          # [..., d, H]
    w_C: Tensor          # [..., d, H]
    dt_down: Tensor      # [..., d, R]   (R == d and dt_up None for full rank)
    dt_up: Tensor | None  # [..., R, d]
    dt_bias: Tensor      # [..., d]

    @property
    def d(self) -> int:
        return self.a_log.shape[-2]

    @property
    def H(self) -> int:
        return self.a_log.shape[-1]

    @property
    def A(self) -> Tensor:
        with uncounted():
            return mul(exp(self.a_log), -1.0)

    @classmethod
    def init(cls, d: int, H: int, rng: np.random.Generator, routes: int | None = None,
             dt_rank: int | None = None, dtype=np.float32, dt_min: float = 1e-3,
             dt_max: float = 0.1, std: float = 0.02) -> ScanParams:
        lead = () if routes is None else (routes,)
        # -A spans [1, H] log-uniformly over the state index
        a = np.log(np.geomspace(1.0, float(H), H)) if H > 1 else np.zeros(1)
        a_log = np.broadcast_to(a, lead + (d, H)).copy()
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), lead + (d,)))
        dt_bias = dt + np.log(-np.expm1(-dt))     # inverse softplus

        def normal(*shape):
            return rng.normal(0.0, std, lead + shape)

        if dt_rank is None:
            dt_down, dt_up = normal(d, d), None
        else:
            dt_down, dt_up = normal(d, dt_rank), normal(dt_rank, d)
        T = lambda a: Tensor(a, requires_grad=True, dtype=dtype)  # noqa: E731
        return cls(T(a_log), T(np.ones(lead + (d,))), T(normal(d, H)), T(normal(d, H)),
                   T(dt_down), None if dt_up is None else T(dt_up), T(dt_bias))

    def tensors(self) -> dict[str, Tensor]:
        out = {"a_log": self.a_log, "D": self.D, "w_B": self.w_B, "w_C": self.w_C,
               "dt_down": self.dt_down, "dt_bias": self.dt_bias}
        if self.dt_up is not None:
            out["dt_up"] = self.dt_up
        return out

    def project(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Sequence-dependent (delta, B, C) from x of shape [..., L, d]."""
        z = linear(x, self.dt_down)
        if self.dt_up is not None:
            z = linear(z, self.dt_up)
        bias = reshape(self.dt_bias, self.dt_bias.shape[:-1] + (1, self.d))
        delta = softplus(z + bias)
        return delta, linear(x, self.w_B), linear(x, self.w_C)

    def __call__(self, x: Tensor, mode: str = "exact") -> Tensor:
        delta, B, C = self.project(x)
        return selective_scan(x, delta, self.A, B, C, self.D, mode=mode)
