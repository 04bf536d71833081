"""Synthetic crack images, folder datasets and training augmentation."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


class LoadError(IOError):
    pass


@dataclass
class SegSample:
    image: np.ndarray     # [3, S, S] float in [0, 1]
    mask: np.ndarray      # [S, S] uint8 in {0, 1}
    id: str = ""
    strokes: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.mask.shape:
            raise LoadError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} misaligned")


@dataclass
class SynthConfig:
    count: int = 200
    size: int = 64
    width_min: float = 2.0
    width_max: float = 5.0
    cracks_min: int = 1
    cracks_max: int = 3
    texture: float = 0.08
    noise: float = 0.02
    contrast_min: float = 0.45
    contrast_max: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.count < 0 or self.size < 8:
            raise ValueError("count must be >= 0 and size >= 8")
        if not 0 < self.width_min <= self.width_max:
            raise ValueError("crack widths must satisfy 0 < min <= max")
        if not 0 <= self.cracks_min <= self.cracks_max:
            raise ValueError("crack counts must satisfy 0 <= min <= max")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> SynthConfig:
        types = {f.name: type(f.default) for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = (s.strip() for s in line.split("=", 1))
                if k in types:
                    kw[k] = types[k](v)
        return cls(**kw)


# ---------------------------------------------------------------------------
# generation


def _random_walk(rng: np.random.Generator, S: int) -> np.ndarray:
    """Polyline vertices (row, col) wandering across the image."""
    n = int(rng.integers(4, 9))
    start = rng.uniform(0, S, 2)
    heading = rng.uniform(0, 2 * np.pi)
    step = S / n * rng.uniform(0.8, 1.4)
    pts = [start]
    for _ in range(n):
        heading += rng.normal(0, 0.5)
        pts.append(pts[-1] + step * np.array([np.sin(heading), np.cos(heading)]))
    return np.array(pts)


def _segment_distance(rr, cc, p, q):
    d = q - p
    denom = float(d @ d) or 1.0
    t = np.clip(((rr - p[0]) * d[0] + (cc - p[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(rr - (p[0] + t * d[0]), cc - (p[1] + t * d[1]))


def rasterize_stroke(points: np.ndarray, widths: np.ndarray, S: int) -> np.ndarray:
    """Pixels whose centre lies within half the local width of the polyline."""
    rr, cc = np.mgrid[0:S, 0:S].astype(np.float64) + 0.5
    out = np.zeros((S, S), dtype=bool)
    for i in range(len(points) - 1):
        out |= _segment_distance(rr, cc, points[i], points[i + 1]) <= widths[i] / 2
    return out


def _texture(rng: np.random.Generator, S: int, amplitude: float) -> np.ndarray:
    if amplitude == 0:
        return np.zeros((S, S))
    t = ndimage.gaussian_filter(rng.normal(size=(S, S)), sigma=S / 10, mode="wrap")
    t += 0.5 * ndimage.gaussian_filter(rng.normal(size=(S, S)), sigma=S / 32, mode="wrap")
    t /= np.abs(t).max() or 1.0
    return amplitude * t


def synth_sample(rng: np.random.Generator, cfg: SynthConfig, sid: str) -> SegSample:
    S = cfg.size
    base = rng.uniform(0.45, 0.75)
    tint = 1.0 + rng.uniform(-0.06, 0.06, 3)
    background = base + _texture(rng, S, cfg.texture)
    mask = np.zeros((S, S), dtype=bool)
    strokes = []
    darkness = np.zeros((S, S))
    for _ in range(int(rng.integers(cfg.cracks_min, cfg.cracks_max + 1))):
        pts = _random_walk(rng, S)
        widths = rng.uniform(cfg.width_min, cfg.width_max, len(pts) - 1)
        contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max)
        stroke = rasterize_stroke(pts, widths, S)
        strokes.append((pts, widths))
        mask |= stroke
        darkness = np.maximum(darkness, stroke * contrast)
    gray = background * (1.0 - darkness)
    image = gray[None] * tint[:, None, None]
    if cfg.noise:
        image = image + rng.normal(0, cfg.noise, image.shape)
    image = np.clip(image, 0.0, 1.0)
    return SegSample(image.astype(np.float32), mask.astype(np.uint8), sid, strokes)


def generate_synthetic(cfg: SynthConfig) -> list[SegSample]:
    """Deterministic dataset; sample i uses its own child stream of ``cfg.seed``."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.count)
    return [synth_sample(np.random.default_rng(s), cfg, f"synth_{i:05d}")
            for i, s in enumerate(seeds)]


# ---------------------------------------------------------------------------
# disk layout: <root>/images/*.png, <root>/masks/*.png


def save_sample(s: SegSample, root: str | os.PathLike) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rgb = np.round(np.transpose(s.image, (1, 2, 0)) * 255).astype(np.uint8)
    Image.fromarray(rgb, "RGB").save(root / "images" / f"{s.id}.png")
    Image.fromarray((s.mask * 255).astype(np.uint8), "L").save(root / "masks" / f"{s.id}.png")


def write_dataset(samples, root: str | os.PathLike, cfg: SynthConfig | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_sample(s, root)
    if cfg is not None:
        (root / "gen_config.txt").write_text(cfg.to_text())
    return root


def _read_png(path: Path, mode: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert(mode))


def load_folder(images_dir, masks_dir) -> list[SegSample]:
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    out = []
    for img_path in sorted(images_dir.glob("*.png")):
        mask_path = masks_dir / img_path.name
        if not mask_path.exists():
            raise LoadError(f"no mask for image {img_path.name} in {masks_dir}")
        rgb = _read_png(img_path, "RGB").astype(np.float32) / 255.0
        m = _read_png(mask_path, "L").astype(np.float32) / 255.0
        if m.shape != rgb.shape[:2]:
            raise LoadError(f"{img_path.name}: mask {m.shape} does not match image {rgb.shape[:2]}")
        out.append(SegSample(np.ascontiguousarray(rgb.transpose(2, 0, 1)),
                             (m >= 0.5).astype(np.uint8), img_path.stem))
    return out


def load_dataset(root) -> list[SegSample]:
    root = Path(root)
    if not (root / "images").is_dir() or not (root / "masks").is_dir():
        raise LoadError(f"{root} must contain images/ and masks/")
    return load_folder(root / "images", root / "masks")


# ---------------------------------------------------------------------------
# augmentation


def hflip(s: SegSample) -> SegSample:
    return SegSample(np.ascontiguousarray(s.image[:, :, ::-1]),
                     np.ascontiguousarray(s.mask[:, ::-1]), s.id)


def color_jitter(image: np.ndarray, brightness: float, contrast: float,
                 saturation: float) -> np.ndarray:
    if brightness == contrast == saturation == 1.0:
        return image
    x = image * brightness
    grey = x.mean()
    x = (x - grey) * contrast + grey
    lum = x.mean(axis=0, keepdims=True)
    x = (x - lum) * saturation + lum
    return np.clip(x, 0.0, 1.0).astype(image.dtype)


def augment(s: SegSample, seed, p_flip: float = 0.5, jitter: tuple[float, float] = (0.8, 1.2),
            force_flip: bool | None = None) -> SegSample:
    """Joint horizontal flip and image-only colour jitter."""
    rng = np.random.default_rng(seed)
    flip = rng.random() < p_flip if force_flip is None else force_flip
    b, c, sat = rng.uniform(*jitter, size=3)
    out = hflip(s) if flip else SegSample(s.image, s.mask, s.id)
    out.image = color_jitter(out.image, b, c, sat)
    return out


def split_dataset(samples, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle, then contiguous train/val/test slices."""
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(fractions[0] * len(samples)))
    n_val = int(round(fractions[1] * len(samples)))
    pick = lambda idx: [samples[i] for i in idx]  # noqa: E731
    return (pick(order[:n_train]), pick(order[n_train:n_train + n_val]),
            pick(order[n_train + n_val:]))
