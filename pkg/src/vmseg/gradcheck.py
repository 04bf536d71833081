"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-4,
                 indices=None) -> np.ndarray:
    """d fn() / d t by central differences; ``fn`` must return a scalar.

    With ``indices`` (flat positions) only those entries are estimated and
    the rest of the result stays zero.
    """
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        f = []
        for k in (2, 1, -1, -2):
            flat[i] = old + k * step
            f.append(fn().item())
        flat[i] = old
        # fourth-order central stencil keeps truncation error negligible at a
        # step large enough that float64 round-off stays small
        gflat[i] = (-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * step)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise then maximized."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor],
                    step: float = 1e-4, floor: float = 1e-6,
                    max_entries: int | None = None) -> float:
    """Largest relative error between analytic and numeric gradients.

    The loss is projected onto a fixed random direction first if it is not
    a scalar, so every output element contributes.  ``max_entries`` caps
    the number of finite-difference probes per parameter (a seeded random
    subset) for models too large to probe exhaustively.
    """
    out = fn()
    weights = None
    if out.size != 1:
        weights = np.random.default_rng(0).normal(size=out.shape)

    def scalar():
        o = fn()
        if weights is None:
            return o
        return (o * Tensor(weights.astype(o.dtype))).sum()

    for p in params:
        p.grad = None
    backward(scalar())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if max_entries is not None and p.size > max_entries:
            idx = np.random.default_rng(p.size).choice(p.size, max_entries, replace=False)
            numeric = numeric_grad(scalar, p, step, idx).reshape(-1)[idx]
            analytic = analytic.reshape(-1)[idx]
        else:
            numeric = numeric_grad(scalar, p, step)
        # relative to the overall gradient scale so near-zero entries do not dominate
        scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), floor)
        err = float(np.max(np.abs(analytic - numeric)) / scale)
        worst = max(worst, err)
    return worst
