"""Analytic operation counts.

Convention: one multiply-accumulate (MAC) is 2 FLOPs; normalization,
activation, elementwise and reduction work is 1 FLOP per element produced
(reductions: one per addition).  Parameter-only transforms that do not
depend on the input are not counted.

The same convention drives :func:`vmseg.tensor.count_ops`, so the analytic
counts here can be compared exactly with instrumented execution.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigurationError
from .vmunet import PATCH, VMUNetConfig, full_config

CONVENTION = "FLOPs = 2 x MACs + 1 per elementwise/norm/activation/reduction element"


def flops_linear(tokens: int, n_in: int, n_out: int, bias: bool = False) -> int:
    return 2 * tokens * n_in * n_out + (tokens * n_out if bias else 0)


def flops_conv(L: int, k: int, c_in: int = 1, c_out: int = 1, bias: bool = False) -> int:
    """L output positions, each a dot product over k taps per input channel."""
    return 2 * L * k * c_in * c_out + (L * c_out if bias else 0)


def flops_depthwise(L: int, channels: int, k: int, bias: bool = True) -> int:
    """k x k depthwise kernel on L positions."""
    return 2 * L * channels * k * k + (L * channels if bias else 0)


def attention_core(L: int, d: int, heads: int = 1) -> int:
    """QK^T and weights x V products plus scaling and softmax."""
    return 2 * (2 * L * L * d) + 2 * heads * L * L


def attention_projections(L: int, d: int) -> int:
    return 4 * flops_linear(L, d, d, bias=True)


def flops_attention(L: int, d: int, heads: int = 1, projections: bool = True) -> int:
    """Multi-head self-attention over L tokens of width d."""
    total = attention_core(L, d, heads)
    return total + attention_projections(L, d) if projections else total


def scan_core(L: int, d: int, H: int, routes: int = 1, mode: str = "exact",
              skip: bool = True) -> int:
    """Discretization, recurrence and read-out of ``routes`` scans."""
    cells = routes * L * d * H
    ops = (6 if mode == "exact" else 4) * cells
    macs = 2 * cells + (routes * L * d if skip else 0)
    return 2 * macs + ops


def scan_projections(L: int, d: int, H: int, routes: int = 1, rank: int | None = None) -> int:
    """delta (softplus of a full or low-rank map plus bias), B and C projections."""
    if rank is None:
        dt = flops_linear(L, d, d)
    else:
        dt = flops_linear(L, d, rank) + flops_linear(L, rank, d)
    per_route = dt + L * d + L * d + 2 * flops_linear(L, d, H)
    return routes * per_route


def flops_scan(L: int, d: int, H: int, routes: int = 1, rank: int | None = None,
               mode: str = "exact", projections: bool = True) -> int:
    """Selective scan over L steps of width d with state size H."""
    total = scan_core(L, d, H, routes, mode)
    if projections:
        total += scan_projections(L, d, H, routes, rank)
    if routes > 1:
        total += (routes - 1) * L * d       # summing route outputs on the grid
    return total


# ---------------------------------------------------------------------------
# symbolic architectures

KINDS = ("conv", "depthwise-conv", "linear", "attention", "scan", "norm", "activation",
         "elementwise", "merge", "expand")


@dataclass(frozen=True)
class Layer:
    kind: str
    shape: dict

    def flops(self) -> int:
        s = self.shape
        k = self.kind
        if k == "conv":
            return flops_conv(s["L"], s["k"], s.get("c_in", 1), s.get("c_out", 1), s.get("bias", False))
        if k == "depthwise-conv":
            return flops_depthwise(s["L"], s["channels"], s["k"], s.get("bias", True))
        if k == "linear":
            return flops_linear(s["tokens"], s["n_in"], s["n_out"], s.get("bias", False))
        if k == "attention":
            return flops_attention(s["L"], s["d"], s.get("heads", 1), s.get("projections", True))
        if k == "scan":
            return flops_scan(s["L"], s["d"], s["H"], s.get("routes", 1), s.get("rank"),
                              s.get("mode", "exact"))
        if k in ("norm", "activation", "elementwise"):
            return s["elements"]
        if k == "merge":
            # norm over the 4c concatenation, then 4c -> 2c
            return s["tokens"] * 4 * s["c"] + flops_linear(s["tokens"], 4 * s["c"], 2 * s["c"])
        if k == "expand":
            sc = s["scale"]
            out_c = s["c"] if sc == PATCH else s["c"] // 2
            return flops_linear(s["tokens"], s["c"], sc * sc * out_c) + s["tokens"] * sc * sc * out_c
        raise ConfigurationError(f"unknown layer kind {k!r}")


@dataclass
class ArchSpec:
    name: str
    resolution: int
    layers: list[Layer] = field(default_factory=list)
    approximate: bool = False

    def add(self, kind: str, **shape) -> None:
        if kind not in KINDS:
            raise ConfigurationError(f"unknown layer kind {kind!r}")
        self.layers.append(Layer(kind, shape))


def flops_network(spec: ArchSpec) -> int:
    return sum(layer.flops() for layer in spec.layers)


def _vss_block(spec: ArchSpec, L: int, c: int, cfg: VMUNetConfig) -> None:
    e = cfg.expand * c
    spec.add("norm", elements=L * c)
    spec.add("linear", tokens=L, n_in=c, n_out=e)
    spec.add("activation", elements=L * e)
    spec.add("linear", tokens=L, n_in=c, n_out=e)
    spec.add("depthwise-conv", L=L, channels=e, k=cfg.d_conv, bias=True)
    spec.add("activation", elements=L * e)
    # four sequences are scanned whether or not their parameters are shared
    spec.add("scan", L=L, d=e, H=cfg.d_state, routes=4, rank=cfg.rank_for(c), mode=cfg.scan_mode)
    spec.add("norm", elements=L * e)
    spec.add("elementwise", elements=L * e)
    spec.add("linear", tokens=L, n_in=e, n_out=c)
    spec.add("elementwise", elements=L * c)


def vmunet_arch(cfg: VMUNetConfig | None = None, resolution: int | None = None) -> ArchSpec:
    """Layer list mirroring :class:`vmseg.vmunet.VMUNet` for a single image."""
    cfg = cfg or full_config()
    if resolution is not None:
        cfg = VMUNetConfig(**{**cfg.__dict__, "img_size": (resolution, resolution)})
    H, W = cfg.img_size
    spec = ArchSpec("vmunet", H)
    dims = cfg.stage_dims()
    tokens = [(H // PATCH // 2 ** s) * (W // PATCH // 2 ** s) for s in range(4)]
    C = cfg.embed_dim
    spec.add("linear", tokens=tokens[0], n_in=PATCH * PATCH * cfg.in_chans, n_out=C, bias=True)
    spec.add("norm", elements=tokens[0] * C)
    for s in range(4):
        for _ in range(cfg.depths[s]):
            _vss_block(spec, tokens[s], dims[s], cfg)
        if s < 3:
            spec.add("merge", tokens=tokens[s + 1], c=dims[s])
    for i in range(4):
        s = 3 - i
        if i > 0:
            spec.add("expand", tokens=tokens[s + 1], c=dims[s + 1], scale=2)
            spec.add("elementwise", elements=tokens[s] * dims[s])
        for _ in range(cfg.decoder_depths[i]):
            _vss_block(spec, tokens[s], dims[s], cfg)
    spec.add("expand", tokens=tokens[0], c=C, scale=PATCH)
    spec.add("linear", tokens=H * W, n_in=C, n_out=cfg.num_classes, bias=True)
    return spec


def vit_core_arch(resolution: int, patch: int = 16, dim: int = 768, depth: int = 12,
                  heads: int = 12, mlp_ratio: int = 4) -> ArchSpec:
    """ViT-B/16-style encoder with a per-patch linear mask head (global attention)."""
    spec = ArchSpec("vit-core", resolution, approximate=True)
    L = (resolution // patch) ** 2
    spec.add("linear", tokens=L, n_in=3 * patch * patch, n_out=dim, bias=True)
    for _ in range(depth):
        _vit_block(spec, L, dim, heads, mlp_ratio)
    spec.add("norm", elements=L * dim)
    spec.add("linear", tokens=L, n_in=dim, n_out=patch * patch, bias=True)
    return spec


def _vit_block(spec: ArchSpec, L: int, dim: int, heads: int, mlp_ratio: int) -> None:
    spec.add("norm", elements=L * dim)
    spec.add("attention", L=L, d=dim, heads=heads)
    spec.add("elementwise", elements=L * dim)
    spec.add("norm", elements=L * dim)
    spec.add("linear", tokens=L, n_in=dim, n_out=mlp_ratio * dim, bias=True)
    spec.add("activation", elements=L * mlp_ratio * dim)
    spec.add("linear", tokens=L, n_in=mlp_ratio * dim, n_out=dim, bias=True)
    spec.add("elementwise", elements=L * dim)


def _unet_layers(spec: ArchSpec, resolution: int, widths=(64, 128, 256, 512, 1024)) -> None:
    """Classic U-Net: two 3x3 convs per level, 2x2 pooling / up-convolutions."""
    c_in = 3
    for lvl, c in enumerate(widths):
        L = (resolution // 2 ** lvl) ** 2
        spec.add("conv", L=L, k=9, c_in=c_in, c_out=c, bias=True)
        spec.add("activation", elements=L * c)
        spec.add("conv", L=L, k=9, c_in=c, c_out=c, bias=True)
        spec.add("activation", elements=L * c)
        c_in = c
    for lvl in range(len(widths) - 2, -1, -1):
        c = widths[lvl]
        L = (resolution // 2 ** lvl) ** 2
        spec.add("conv", L=L, k=4, c_in=widths[lvl + 1], c_out=c, bias=True)   # 2x2 up-conv
        spec.add("conv", L=L, k=9, c_in=2 * c, c_out=c, bias=True)
        spec.add("activation", elements=L * c)
        spec.add("conv", L=L, k=9, c_in=c, c_out=c, bias=True)
        spec.add("activation", elements=L * c)
    spec.add("conv", L=resolution ** 2, k=1, c_in=widths[0], c_out=1, bias=True)


def cnn_core_arch(resolution: int) -> ArchSpec:
    spec = ArchSpec("cnn-core", resolution, approximate=True)
    _unet_layers(spec, resolution)
    return spec


def hybrid_core_arch(resolution: int, dim: int = 768, depth: int = 12, heads: int = 12) -> ArchSpec:
    """Convolutional U-Net branch plus a 12-layer transformer on 1/16-scale tokens."""
    spec = ArchSpec("hybrid-core", resolution, approximate=True)
    _unet_layers(spec, resolution)
    L = (resolution // 16) ** 2
    spec.add("linear", tokens=L, n_in=1024, n_out=dim, bias=True)
    for _ in range(depth):
        _vit_block(spec, L, dim, heads, 4)
    spec.add("linear", tokens=L, n_in=dim, n_out=1024, bias=True)
    return spec


ARCHS = {
    "vmunet": lambda r: vmunet_arch(full_config(), r),
    "vit-core": vit_core_arch,
    "cnn-core": cnn_core_arch,
    "hybrid-core": hybrid_core_arch,
}


def arch_spec(name: str, resolution: int) -> ArchSpec:
    if name not in ARCHS:
        raise ConfigurationError(f"unknown architecture {name!r}; choose from {sorted(ARCHS)}")
    return ARCHS[name](resolution)


def flops_table(archs, resolutions) -> list[tuple[int, str, float]]:
    return [(r, a, flops_network(arch_spec(a, r)) / 1e9) for a in archs for r in resolutions]


def flops_csv(archs, resolutions) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["resolution", "arch", "gflops"])
    for r, a, g in flops_table(archs, resolutions):
        w.writerow([r, a, f"{g:.4f}"])
    return buf.getvalue()


def r_squared(x, y, degree: int) -> float:
    """Coefficient of determination of a least-squares polynomial fit."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    coef = np.polyfit(x, y, degree)
    resid = y - np.polyval(coef, x)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot else 1.0


def relative_saving(a: float, b: float) -> float:
    """Fractional reduction of ``a`` relative to ``b``."""
    return 1.0 - a / b if b else math.nan
