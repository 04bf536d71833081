"""Four-route 2-D selective scan.

A feature map is unrolled into four 1-D sequences, each is run through its
own selective scan, and the four outputs are folded back onto the grid and
summed.

Route orders on an ``h x w`` grid (flat position ``r * w + c``):

    1  row-major from the top-left corner
    2  column-major from the top-left corner
    3  route 2 reversed (starts bottom-right)
    4  route 1 reversed (starts bottom-right)
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .scan import ScanParams, selective_scan
from .tensor import DimensionError, Tensor, as_tensor, reshape, sum_, take, transpose

N_ROUTES = 4


@dataclass(frozen=True)
class RouteOrder:
    route: int
    permutation: np.ndarray   # sequence index -> flat grid position
    inverse: np.ndarray       # flat grid position -> sequence index

    def __post_init__(self):
        if self.route not in (1, 2, 3, 4):
            raise ValueError(f"route must be 1..4, got {self.route}")


@lru_cache(maxsize=64)
def route_orders(h: int, w: int) -> tuple[RouteOrder, ...]:
    if h < 1 or w < 1:
        raise DimensionError(f"grid must be at least 1x1, got {h}x{w}")
    grid = np.arange(h * w).reshape(h, w)
    row = grid.reshape(-1)
    col = grid.T.reshape(-1)
    perms = (row, col, col[::-1], row[::-1])
    out = []
    for r, p in enumerate(perms, start=1):
        p = np.ascontiguousarray(p)
        p.setflags(write=False)
        inv = np.argsort(p)
        inv.setflags(write=False)
        out.append(RouteOrder(r, p, inv))
    return tuple(out)


@lru_cache(maxsize=64)
def _stacked_indices(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    orders = route_orders(h, w)
    L = h * w
    fwd = np.concatenate([o.permutation for o in orders])
    inv = np.concatenate([o.inverse + i * L for i, o in enumerate(orders)])
    return fwd, inv


# ---------------------------------------------------------------------------
# channels-last fast path used by the network


def expand_routes(x: Tensor) -> Tensor:
    """[N, h, w, C] -> [N, 4, L, C]."""
    N, h, w, C = x.shape
    fwd, _ = _stacked_indices(h, w)
    flat = reshape(x, (N, h * w, C))
    return reshape(take(flat, fwd, axis=1), (N, N_ROUTES, h * w, C))


def merge_routes(y: Tensor, h: int, w: int) -> Tensor:
    """[N, 4, L, C] -> [N, h, w, C], inverse-permuting each route and summing."""
    N, R, L, C = y.shape
    if R != N_ROUTES or L != h * w:
        raise DimensionError(f"cannot merge {y.shape} onto a {h}x{w} grid")
    _, inv = _stacked_indices(h, w)
    grid = take(reshape(y, (N, R * L, C)), inv, axis=1)
    return reshape(sum_(reshape(grid, (N, R, L, C)), axis=1), (N, h, w, C))


def ss2d(x: Tensor, params: ScanParams, mode: str = "exact") -> Tensor:
    """SS2D on a channels-last map [N, h, w, C].

    ``params`` holds either a leading route axis of size 4 (independent
    routes) or none (one parameter set shared by all routes).
    """
    N, h, w, C = x.shape
    if params.d != C:
        raise DimensionError(f"SS2D width {params.d} does not match {C} channels")
    seqs = expand_routes(x)
    delta, B, Cm = params.project(seqs)
    y = selective_scan(seqs, delta, params.A, B, Cm, params.D, mode=mode)
    return merge_routes(y, h, w)


# ---------------------------------------------------------------------------
# channel-first public surface


def scan_expand(fm) -> list[Tensor]:
    """[..., C, h, w] -> four sequences [..., L, C]."""
    fm = as_tensor(fm)
    *lead, C, h, w = fm.shape
    orders = route_orders(h, w)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead) + 2, len(lead))
    flat = reshape(transpose(fm, axes), tuple(lead) + (h * w, C))
    return [take(flat, o.permutation, axis=-2) for o in orders]


def scan_merge(outputs, orders, h: int | None = None, w: int | None = None) -> Tensor:
    """Inverse-permute each route output to the grid and sum -> [..., C, h, w]."""
    outputs = [as_tensor(o) for o in outputs]
    if len(outputs) != len(orders):
        raise DimensionError("one order per route output is required")
    L = outputs[0].shape[-2]
    if any(o.shape != outputs[0].shape for o in outputs):
        raise DimensionError("route outputs must share one shape")
    if any(o.permutation.size != L for o in orders):
        raise DimensionError(f"orders do not cover sequences of length {L}")
    if h is None or w is None:
        raise DimensionError("grid height and width are required")
    if h * w != L:
        raise DimensionError(f"{h}x{w} grid does not hold L={L}")
    total = None
    for out, order in zip(outputs, orders):
        g = take(out, order.inverse, axis=-2)
        total = g if total is None else total + g
    *lead, _, C = total.shape
    grid = reshape(total, tuple(lead) + (h, w, C))
    nl = len(lead)
    return transpose(grid, tuple(range(nl)) + (nl + 2, nl, nl + 1))


def ss2d_forward(fm, params: ScanParams, mode: str = "exact") -> Tensor:
    """SS2D on a channel-first map [C, h, w] or [N, C, h, w]."""
    fm = as_tensor(fm)
    squeeze = fm.ndim == 3
    x = reshape(fm, (1,) + fm.shape) if squeeze else fm
    y = transpose(ss2d(transpose(x, (0, 2, 3, 1)), params, mode), (0, 3, 1, 2))
    return reshape(y, y.shape[1:]) if squeeze else y
