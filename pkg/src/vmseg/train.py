"""AdamW training with the soft Dice loss, evaluation and logging."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import SegSample, augment
from .metrics import MaskPair, batch_dice_loss, mean_metrics
from .tensor import ConfigurationError, ContractError, NumericError, Tensor
from .vmunet import VMUNet, VMUNetConfig

log = logging.getLogger(__name__)

THRESHOLD = 0.5


def fan_out(seed: int, *keys: int) -> np.random.SeedSequence:
    """Independent, reproducible stream for (seed, key, key, ...)."""
    return np.random.SeedSequence([int(seed), *map(int, keys)])


# stream ids for fan_out
STREAM_INIT, STREAM_SHUFFLE, STREAM_AUGMENT, STREAM_SPLIT, STREAM_DATA = range(5)


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 2
    epochs: int = 30
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    augment: bool = True
    seed: int = 0
    dtype: str = "float32"
    checkpoint: str = ""
    log_path: str = ""

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigurationError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


@dataclass
class AdamWState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], **kw) -> AdamWState:
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], **kw)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamWState,
               lr: float, weight_decay: float = 0.01, names: Sequence[str] | None = None) -> None:
    """In-place decoupled-weight-decay Adam update with bias correction."""
    if len(params) != len(state.m):
        raise ContractError("optimizer state does not match the parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            raise NumericError(f"non-finite gradient for parameter {label}")
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter {p.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data *= (1.0 - lr * weight_decay)
        p.data -= (lr * update).astype(p.dtype)


def clip_grad_norm(grads: list[np.ndarray | None], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads if g is not None)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            if g is not None:
                g *= scale
    return total


def _stack(batch: Sequence[SegSample], dtype) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in batch]).astype(dtype)
    masks = np.stack([s.mask for s in batch]).astype(dtype)[:, None]
    return images, masks


def loss_on_batch(model: VMUNet, images: np.ndarray, masks: np.ndarray) -> Tensor:
    probs = T.sigmoid(model(Tensor(images)))
    return batch_dice_loss(probs, masks)


def predict_masks(model: VMUNet, samples: Sequence[SegSample], batch_size: int = 4) -> list[np.ndarray]:
    dtype = np.dtype(model.cfg.dtype)
    out = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            images, _ = _stack(samples[i:i + batch_size], dtype)
            logits = model(Tensor(images)).data[:, 0]
            # sigmoid(z) >= 0.5  <=>  z >= 0
            out.extend((logits >= 0).astype(np.uint8))
    return out


def evaluate(model: VMUNet, samples: Sequence[SegSample], batch_size: int = 4):
    """Returns (mDS, mIoU, list of MaskPair)."""
    if not samples:
        raise ContractError("evaluation set is empty")
    size = samples[0].mask.shape
    if tuple(size) != tuple(model.cfg.img_size):
        raise ConfigurationError(f"dataset size {size} does not match model input {model.cfg.img_size}")
    preds = predict_masks(model, samples, batch_size)
    pairs = [MaskPair(p, s.mask, s.id) for p, s in zip(preds, samples)]
    mds, miou = mean_metrics(pairs)
    return mds, miou, pairs


@dataclass
class TrainResult:
    model: VMUNet
    history: list[dict] = field(default_factory=list)
    best_val: float = float("nan")
    seconds: float = 0.0


def train(model_cfg: VMUNetConfig | VMUNet, data: Sequence[SegSample], tc: TrainConfig,
          val: Sequence[SegSample] = (), progress: bool = False) -> TrainResult:
    """Seeded shuffle, augment, batch, Dice loss, backward, clip, AdamW, per epoch."""
    if not data:
        raise ContractError("training set is empty")
    model = model_cfg if isinstance(model_cfg, VMUNet) else VMUNet(model_cfg)
    dtype = np.dtype(model.cfg.dtype)
    names, params = zip(*model.named_parameters())
    state = AdamWState.zeros_like(params, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)
    result = TrainResult(model)
    best = -np.inf
    t0 = time.perf_counter()
    log_fh = None
    if tc.log_path:
        log_fh = open(tc.log_path, "w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_mds", "val_miou"])
    try:
        for epoch in range(1, tc.epochs + 1):
            order = np.random.default_rng(fan_out(tc.seed, STREAM_SHUFFLE, epoch)).permutation(len(data))
            losses = []
            for b in range(0, len(order), tc.batch_size):
                batch = []
                for idx in order[b:b + tc.batch_size]:
                    s = data[idx]
                    if tc.augment:
                        s = augment(s, fan_out(tc.seed, STREAM_AUGMENT, epoch, idx))
                    batch.append(s)
                images, masks = _stack(batch, dtype)
                loss = loss_on_batch(model, images, masks)
                if not np.isfinite(loss.data):
                    raise NumericError(f"loss became {float(loss.data)} at epoch {epoch}, batch {b // tc.batch_size}")
                for p in params:
                    p.grad = None
                T.backward(loss)
                grads = [p.grad for p in params]
                clip_grad_norm(grads, tc.clip_norm)
                adamw_step(params, grads, state, tc.lr, tc.weight_decay, names)
                losses.append(float(loss.data))
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                   "val_mds": float("nan"), "val_miou": float("nan")}
            if val:
                row["val_mds"], row["val_miou"], _ = evaluate(model, val)
            result.history.append(row)
            score = row["val_mds"] if val else -row["train_loss"]
            if score > best:
                best = score
                if tc.checkpoint:
                    save_checkpoint(tc.checkpoint, model, {"epoch": epoch})
            if log_fh:
                writer.writerow([epoch, f"{row['train_loss']:.6f}", f"{row['val_mds']:.6f}",
                                 f"{row['val_miou']:.6f}"])
                log_fh.flush()
            msg = (f"epoch {epoch:3d}  loss {row['train_loss']:.4f}  val mDS {row['val_mds']:.4f}"
                   f"  mIoU {row['val_miou']:.4f}  {time.perf_counter() - t0:.0f}s")
            log.info(msg)
            if progress:
                print(msg, flush=True)
    finally:
        if log_fh:
            log_fh.close()
    result.best_val = best if val else float("nan")
    result.seconds = time.perf_counter() - t0
    return result
