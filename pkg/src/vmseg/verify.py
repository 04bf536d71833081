"""Self-check suites shared by the command line and the test-suite.

Each suite returns a list of :class:`Check` rows; a suite passes when every
row does.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .flops import (CONVENTION, arch_spec, attention_core, flops_attention, flops_network,
                    flops_scan, r_squared, vmunet_arch)
from .gradcheck import check_gradients
from .metrics import dice_loss, dice_score, iou
from .scan import ScanInputs, ScanParams, scan_matrix_form, scan_recurrence, selective_scan
from .ss2d import ss2d_forward
from .tensor import Tensor
from .vmunet import VMUNet, VMUNetConfig, VSSBlock, full_config, tiny_config

GRAD_TOL = 1e-4
RESOLUTIONS = (224, 448, 896, 1792)


@dataclass
class Check:
    name: str
    value: float
    limit: str
    passed: bool

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.value:.3e} ({self.limit})"


# ---------------------------------------------------------------------------
# recurrence vs masked-product form


def random_scan_instance(rng: np.random.Generator, dtype=np.float64, max_L=64, max_d=8, max_H=16):
    L = int(rng.integers(1, max_L + 1))
    d = int(rng.integers(1, max_d + 1))
    H = int(rng.integers(1, max_H + 1))
    x = rng.normal(size=(L, d))
    delta = np.exp(rng.uniform(np.log(1e-3), np.log(0.5), (L, d)))
    A = -np.exp(rng.uniform(np.log(0.05), np.log(4.0), (d, H)))
    B = rng.normal(size=(L, H))
    C = rng.normal(size=(L, H))
    h0 = rng.normal(size=(d, H))
    cast = lambda a: Tensor(a.astype(dtype))  # noqa: E731
    return ScanInputs(cast(x), cast(delta), cast(B), cast(C), cast(h0)), cast(A)


def max_form_gap(n: int, dtype, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    with T.no_grad():
        for _ in range(n):
            inp, A = random_scan_instance(rng, dtype)
            y_rec, _ = scan_recurrence(inp, A, mode="simplified")
            y_mat = scan_matrix_form(inp, A)
            worst = max(worst, float(np.max(np.abs(y_rec.data.astype(np.float64)
                                                   - y_mat.data.astype(np.float64)))))
    return worst


def suite_equivalence(n: int = 1000, seed: int = 0) -> list[Check]:
    g64 = max_form_gap(n, np.float64, seed)
    g32 = max_form_gap(n, np.float32, seed)
    return [Check(f"max |recurrence - matrix form| float64, {n} instances", g64, "< 1e-10", g64 < 1e-10),
            Check(f"max |recurrence - matrix form| float32, {n} instances", g32, "< 1e-5", g32 < 1e-5)]


# ---------------------------------------------------------------------------
# finite-difference gradients


def _leaf(rng, *shape, scale=1.0, positive=False):
    a = rng.normal(size=shape) * scale
    if positive:
        a = np.abs(a) + 0.1
    return Tensor(a, requires_grad=True, dtype=np.float64)


def _jitter(leaves, rng, scale=0.3):
    """Move parameters off their initial values so no path is negligibly small."""
    for p in leaves:
        p.data = p.data + rng.normal(0.0, scale, p.shape)


def gradient_cases(seed: int = 0) -> dict[str, Callable[[], float]]:
    """Name -> zero-argument callable returning the max relative error."""
    rng = np.random.default_rng(seed)

    def matmul():
        a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
        return check_gradients(lambda: T.matmul(a, b), [a, b])

    def layer_norm():
        x, g, b = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
        return check_gradients(lambda: T.layer_norm(x, g, b), [x, g, b])

    def silu():
        x = _leaf(rng, 4, 5, scale=2.0)
        return check_gradients(lambda: T.silu(x), [x])

    def depthwise_conv():
        x, k, b = _leaf(rng, 2, 3, 5, 6), _leaf(rng, 3, 3, 3), _leaf(rng, 3)
        return check_gradients(lambda: T.depthwise_conv2d(x, k, b), [x, k, b])

    def scan():
        L, d, H = 7, 3, 4
        x, B, C = _leaf(rng, 2, L, d), _leaf(rng, 2, L, H), _leaf(rng, 2, L, H)
        delta = _leaf(rng, 2, L, d, positive=True)
        A = Tensor(-np.exp(rng.normal(size=(d, H))), requires_grad=True, dtype=np.float64)
        D, h0 = _leaf(rng, d), _leaf(rng, 2, d, H)
        errs = [check_gradients(lambda m=m: selective_scan(x, delta, A, B, C, D, h0, mode=m),
                                [x, delta, A, B, C, D, h0]) for m in ("exact", "simplified")]
        return max(errs)

    def ss2d():
        params = ScanParams.init(4, 3, rng, routes=4, dt_rank=2, dtype=np.float64)
        fm = _leaf(rng, 1, 4, 3, 4)
        leaves = [fm] + list(params.tensors().values())
        _jitter(leaves[1:], rng)
        return check_gradients(lambda: ss2d_forward(fm, params), leaves)

    def vss_block():
        cfg = VMUNetConfig(d_state=3, dtype="float64")
        blk = VSSBlock(4, cfg, rng, np.float64)
        x = _leaf(rng, 1, 3, 4, 4)
        _jitter(blk.parameters(), rng)
        return check_gradients(lambda: blk(x), [x] + blk.parameters())

    def vmunet_tiny():
        cfg = tiny_config(embed_dim=4, depths=(1, 1, 1, 1), decoder_depths=(1, 1, 1, 1),
                          d_state=2, img_size=(32, 32), dtype="float64", seed=seed)
        model = VMUNet(cfg)
        _jitter(model.parameters(), rng, 0.1)
        image = Tensor(rng.uniform(size=(1, 3, 32, 32)), dtype=np.float64)
        target = (rng.uniform(size=(1, 1, 32, 32)) > 0.7).astype(np.float64)
        loss = lambda: dice_loss(T.sigmoid(model(image)), target)  # noqa: E731
        return check_gradients(loss, model.parameters(), max_entries=3)

    def dice():
        logits = _leaf(rng, 2, 1, 5, 5)
        target = (rng.uniform(size=(2, 1, 5, 5)) > 0.5).astype(np.float64)
        return check_gradients(lambda: dice_loss(T.sigmoid(logits), target), [logits])

    return {"matmul": matmul, "layer_norm": layer_norm, "silu": silu,
            "depthwise_conv": depthwise_conv, "scan": scan, "ss2d": ss2d,
            "vss_block": vss_block, "vmunet_tiny": vmunet_tiny, "dice_loss": dice}


def suite_gradients(seed: int = 0) -> list[Check]:
    out = []
    with T.default_dtype(np.float64):
        for name, case in gradient_cases(seed).items():
            err = case()
            out.append(Check(f"gradient rel-err {name}", err, f"< {GRAD_TOL:g}", err < GRAD_TOL))
    return out


# ---------------------------------------------------------------------------
# discretization limit


def discretization_ratio(seed: int = 0, scale: float = 2e-3) -> tuple[float, float, float]:
    """(|exact - simplified| at delta, at delta/2, ratio)."""
    rng = np.random.default_rng(seed)
    L, d, H = 32, 4, 8
    x, B, C = rng.normal(size=(L, d)), rng.normal(size=(L, H)), rng.normal(size=(L, H))
    delta = scale * np.exp(rng.uniform(-0.5, 0.5, (L, d)))
    A = -np.exp(rng.uniform(np.log(0.5), np.log(4.0), (d, H)))

    def gap(dl):
        with T.no_grad():
            args = [Tensor(a, dtype=np.float64) for a in (x, dl, A, B, C)]
            ye = selective_scan(*args, mode="exact").data
            ys = selective_scan(*args, mode="simplified").data
        return float(np.max(np.abs(ye - ys)))

    g1, g2 = gap(delta), gap(delta / 2)
    return g1, g2, g1 / g2


def suite_discretization(seed: int = 0) -> list[Check]:
    _, _, ratio = discretization_ratio(seed)
    return [Check("gap ratio when halving delta", ratio, "in [3.5, 4.5]", 3.5 <= ratio <= 4.5)]


# ---------------------------------------------------------------------------
# metric identities


def suite_metrics(n: int = 1000, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        shape = tuple(rng.integers(1, 17, 2))
        p = (rng.uniform(size=shape) < rng.uniform(0.05, 0.95)).astype(np.uint8)
        t = (rng.uniform(size=shape) < rng.uniform(0.05, 0.95)).astype(np.uint8)
        t.flat[rng.integers(t.size)] = 1
        ds, j = dice_score(p, t), iou(p, t)
        worst = max(worst, abs(ds - 2 * j / (1 + j)))
    # two pixels predicted, two true, one shared
    P = np.array([[1, 1, 0, 0]], dtype=np.uint8)
    Tm = np.array([[0, 1, 1, 0]], dtype=np.uint8)
    hand = max(abs(dice_score(P, Tm) - 0.5), abs(iou(P, Tm) - 1 / 3))
    return [Check(f"max |DS - 2 IoU/(1+IoU)| over {n} pairs", worst, "< 1e-12", worst < 1e-12),
            Check("hand count DS=1/2, IoU=1/3", hand, "< 1e-12", hand < 1e-12)]


# ---------------------------------------------------------------------------
# complexity model


def gflops_curve(arch: str, resolutions=RESOLUTIONS) -> np.ndarray:
    return np.array([flops_network(arch_spec(arch, r)) / 1e9 for r in resolutions])


def suite_complexity() -> list[Check]:
    L, d, H = 4096, 64, 16
    scan_ratio = flops_scan(2 * L, d, H) / flops_scan(L, d, H)
    attn_ratio = attention_core(2 * L, d) / attention_core(L, d)
    px = np.array(RESOLUTIONS, dtype=float) ** 2
    r2_lin = r_squared(px, gflops_curve("vmunet"), 1)
    r2_quad = r_squared(px, gflops_curve("vit-core"), 2)
    at448 = flops_network(vmunet_arch(full_config(), 448)) / 1e9
    hyb = gflops_curve("hybrid-core", (1792,))[0]
    vm = gflops_curve("vmunet", (1792,))[0]
    full_attn = flops_attention(2 * L, d) / flops_attention(L, d)
    return [
        Check("flops_scan(2L) / flops_scan(L)", scan_ratio, "== 2", scan_ratio == 2.0),
        Check("attention leading term ratio", attn_ratio, "== 4", attn_ratio == 4.0),
        Check("full attention ratio (with projections)", full_attn, "in (2, 4]", 2 < full_attn <= 4),
        Check("vmunet linear fit R^2 in pixel count", r2_lin, "> 0.999", r2_lin > 0.999),
        Check("vit-core quadratic fit R^2 in pixel count", r2_quad, "> 0.999", r2_quad > 0.999),
        Check(f"vmunet GFLOPs at 448 [{CONVENTION}]", at448, "in [8, 48]", 8 <= at448 <= 48),
        Check("vmunet / hybrid-core GFLOPs at 1792", vm / hyb, "<= 0.15", vm / hyb <= 0.15),
    ]


SUITES = {
    "equivalence": suite_equivalence,
    "gradients": suite_gradients,
    "discretization": suite_discretization,
    "metrics": suite_metrics,
    "complexity": suite_complexity,
}
