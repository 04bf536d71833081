"""VM-UNet: a U-shaped encoder-decoder built from visual state-space blocks.

Feature maps are channel-first ``[N, C, H, W]`` at the model boundary and
channels-last ``[N, H, W, C]`` inside, where every linear layer acts on the
last axis.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, param
from .scan import ScanParams
from .ss2d import ss2d
from .tensor import ConfigurationError, DimensionError, Tensor

PATCH = 4


@dataclass
class VMUNetConfig:
    embed_dim: int = 24
    depths: tuple[int, ...] = (1, 1, 2, 1)
    decoder_depths: tuple[int, ...] = (2, 2, 2, 2)   # deepest stage first
    d_state: int = 8
    img_size: tuple[int, int] = (64, 64)
    in_chans: int = 3
    num_classes: int = 1
    expand: int = 1                 # width multiplier inside a VSS block
    d_conv: int = 3
    dt_rank: str = "auto"           # "auto" -> ceil(width / 16), "full", or an int as text
    scan_mode: str = "exact"
    shared_routes: bool = False
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.depths = tuple(int(v) for v in self.depths)
        self.decoder_depths = tuple(int(v) for v in self.decoder_depths)
        self.img_size = tuple(int(v) for v in self.img_size)
        if len(self.depths) != 4 or len(self.decoder_depths) != 4:
            raise ConfigurationError("four encoder and four decoder depths are required")
        if any(s % (PATCH * 8) for s in self.img_size):
            raise ConfigurationError(f"input size {self.img_size} must be divisible by 32")
        if self.num_classes != 1:
            raise ConfigurationError("only binary segmentation (one logit) is supported")
        if self.d_conv % 2 == 0:
            raise ConfigurationError("depthwise kernel size must be odd")

    def stage_dims(self) -> list[int]:
        return [self.embed_dim * 2 ** s for s in range(4)]

    def rank_for(self, width: int) -> int | None:
        if self.dt_rank == "full":
            return None
        if self.dt_rank == "auto":
            return math.ceil(width / 16)
        return int(self.dt_rank)

    # key=value text form used by checkpoints and the CLI
    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(str(i) for i in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> VMUNetConfig:
        kinds = {f.name: f for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in kinds:
                continue
            default = kinds[k].default
            if isinstance(default, tuple):
                kw[k] = tuple(int(i) for i in v.split(","))
            elif isinstance(default, bool):
                kw[k] = v.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kw[k] = int(v)
            else:
                kw[k] = v
        return cls(**kw)


def tiny_config(**kw) -> VMUNetConfig:
    return VMUNetConfig(**kw)


def full_config(**kw) -> VMUNetConfig:
    # mirrored decoder with a 1x inner width: ~24 M parameters, ~43 GFLOPs at 448
    base = dict(embed_dim=96, depths=(2, 2, 9, 2), decoder_depths=(2, 9, 2, 2),
                d_state=16, img_size=(448, 448), expand=1)
    base.update(kw)
    return VMUNetConfig(**base)


# ---------------------------------------------------------------------------
# layers


class PatchEmbed(Module):
    def __init__(self, cfg: VMUNetConfig, rng, dtype):
        self.proj = Linear(PATCH * PATCH * cfg.in_chans, cfg.embed_dim, rng, dtype=dtype)
        self.norm = LayerNorm(cfg.embed_dim, dtype)

    def __call__(self, image: Tensor) -> Tensor:
        """[N, 3, H, W] -> [N, H/4, W/4, C]."""
        N, c, H, W = image.shape
        if H % PATCH or W % PATCH:
            raise ConfigurationError(f"image {H}x{W} is not divisible into 4x4 patches")
        x = T.reshape(image, (N, c, H // PATCH, PATCH, W // PATCH, PATCH))
        x = T.transpose(x, (0, 2, 4, 3, 5, 1))
        x = T.reshape(x, (N, H // PATCH, W // PATCH, PATCH * PATCH * c))
        return self.norm(self.proj(x))


class PatchMerge(Module):
    """2x2 neighbourhood concat -> norm -> linear 4c -> 2c."""

    def __init__(self, c: int, rng, dtype):
        self.norm = LayerNorm(4 * c, dtype)
        self.reduction = Linear(4 * c, 2 * c, rng, bias=False, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        N, h, w, c = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"patch merging needs even sides, got {h}x{w}")
        x = T.reshape(x, (N, h // 2, 2, w // 2, 2, c))
        x = T.transpose(x, (0, 1, 3, 4, 2, 5))   # neighbour order (0,0),(1,0),(0,1),(1,1)
        x = T.reshape(x, (N, h // 2, w // 2, 4 * c))
        return self.reduction(self.norm(x))


class PatchExpand(Module):
    """Linear widening, pixel-shuffle onto a finer grid, then norm.

    Non-final: c -> 2c, shuffle by 2 -> c/2 channels.  Final: c -> 16c,
    shuffle by 4 -> c channels.
    """

    def __init__(self, c: int, rng, dtype, final: bool = False):
        if not final and c % 2:
            raise ConfigurationError(f"patch expanding needs an even width, got {c}")
        self.scale = PATCH if final else 2
        self.out_c = c if final else c // 2
        self.expand = Linear(c, self.scale ** 2 * self.out_c, rng, bias=False, dtype=dtype)
        self.norm = LayerNorm(self.out_c, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        N, h, w, _ = x.shape
        s, c = self.scale, self.out_c
        x = T.reshape(self.expand(x), (N, h, w, s, s, c))
        x = T.transpose(x, (0, 1, 3, 2, 4, 5))
        return self.norm(T.reshape(x, (N, h * s, w * s, c)))


class VSSBlock(Module):
    """Two-pathway residual block.

    out = x + W_out( silu(W_1 LN(x)) * LN(SS2D(silu(dwconv(W_2 LN(x))))) )
    """

    def __init__(self, c: int, cfg: VMUNetConfig, rng, dtype):
        inner = cfg.expand * c
        self.norm = LayerNorm(c, dtype)
        self.gate_proj = Linear(c, inner, rng, bias=False, dtype=dtype)
        self.in_proj = Linear(c, inner, rng, bias=False, dtype=dtype)
        bound = 1.0 / cfg.d_conv
        self.conv_kernel = param(rng.uniform(-bound, bound, (inner, cfg.d_conv, cfg.d_conv)), dtype)
        self.conv_bias = param(np.zeros(inner), dtype)
        self.scan = ScanParams.init(inner, cfg.d_state, rng,
                                    routes=None if cfg.shared_routes else 4,
                                    dt_rank=cfg.rank_for(c), dtype=dtype)
        self.out_norm = LayerNorm(inner, dtype)
        self.out_proj = Linear(inner, c, rng, bias=False, dtype=dtype)
        self.mode = cfg.scan_mode

    def __call__(self, x: Tensor) -> Tensor:
        z = self.norm(x)
        gate = T.silu(self.gate_proj(z))
        u = T.depthwise_conv2d(self.in_proj(z), self.conv_kernel, self.conv_bias,
                               channels_last=True)
        u = self.out_norm(ss2d(T.silu(u), self.scan, self.mode))
        return x + self.out_proj(gate * u)


class Stage(Module):
    def __init__(self, c: int, depth: int, cfg, rng, dtype):
        self.blocks = [VSSBlock(c, cfg, rng, dtype) for _ in range(depth)]

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class VMUNet(Module):
    def __init__(self, cfg: VMUNetConfig):
        self.cfg = cfg
        dtype = np.dtype(cfg.dtype).type
        rng = np.random.default_rng(cfg.seed)
        dims = cfg.stage_dims()
        self.embed = PatchEmbed(cfg, rng, dtype)
        self.encoder = [Stage(dims[s], cfg.depths[s], cfg, rng, dtype) for s in range(4)]
        self.merges = [PatchMerge(dims[s], rng, dtype) for s in range(3)]
        # decoder lists run deepest -> shallowest
        self.decoder = [Stage(dims[3 - i], cfg.decoder_depths[i], cfg, rng, dtype)
                        for i in range(4)]
        self.expands = [PatchExpand(dims[3 - i], rng, dtype) for i in range(3)]
        self.final_expand = PatchExpand(dims[0], rng, dtype, final=True)
        self.head = Linear(dims[0], cfg.num_classes, rng, dtype=dtype)

    def features(self, image: Tensor) -> list[Tensor]:
        """Encoder stage outputs (channels-last), shallowest first."""
        x = self.embed(image)
        skips = []
        for s in range(4):
            x = self.encoder[s](x)
            skips.append(x)
            if s < 3:
                x = self.merges[s](x)
        return skips

    def __call__(self, image) -> Tensor:
        image = T.as_tensor(image)
        N, c, H, W = image.shape
        if (H, W) != tuple(self.cfg.img_size) or c != self.cfg.in_chans:
            raise ConfigurationError(
                f"input {image.shape} does not match configured {self.cfg.in_chans}x{self.cfg.img_size}")
        skips = self.features(image)
        x = skips[3]
        for i in range(4):
            if i > 0:
                x = self.expands[i - 1](x) + skips[3 - i]
            x = self.decoder[i](x)
        x = self.final_expand(x)
        logits = self.head(x)                          # [N, H, W, 1]
        return T.transpose(logits, (0, 3, 1, 2))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ConfigurationError(f"state mismatch: missing {sorted(missing)[:3]}, "
                                     f"unexpected {sorted(extra)[:3]}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise ConfigurationError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def predict_proba(self, images) -> np.ndarray:
        with T.no_grad():
            return T.sigmoid(self(images)).data


def count_parameters(cfg: VMUNetConfig) -> int:
    return VMUNet(cfg).num_parameters()
