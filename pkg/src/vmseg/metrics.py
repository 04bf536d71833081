"""Region-overlap metrics and the soft Dice loss."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

HARD_EPS = 1e-7
SOFT_EPS = 1.0


@dataclass
class MaskPair:
    P: np.ndarray
    T: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        self.P = np.asarray(self.P)
        self.T = np.asarray(self.T)
        if self.P.shape != self.T.shape:
            raise DimensionError(f"prediction {self.P.shape} and truth {self.T.shape} differ")


def _binary(a, name: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == bool:
        return a
    if not np.all((a == 0) | (a == 1)):
        raise ContractError(f"{name} must be a binary map")
    return a.astype(bool)


def _counts(P, T_):
    P, T_ = np.asarray(P), np.asarray(T_)
    if P.shape != T_.shape:
        raise DimensionError(f"prediction {P.shape} and truth {T_.shape} differ")
    P, T_ = _binary(P, "P"), _binary(T_, "T")
    inter = np.count_nonzero(P & T_)
    return inter, np.count_nonzero(P), np.count_nonzero(T_)


# The smoothing term only enters when both masks are empty (giving eps/eps = 1);
# otherwise the ratios are exact, so DS = 2 IoU / (1 + IoU) holds to round-off.


def dice_score(P, T_, eps: float = HARD_EPS) -> float:
    inter, p, t = _counts(P, T_)
    if p + t == 0:
        return eps / eps
    return 2 * inter / (p + t)


def iou(P, T_, eps: float = HARD_EPS) -> float:
    inter, p, t = _counts(P, T_)
    if p + t == 0:
        return eps / eps
    return inter / (p + t - inter)


def mean_metrics(pairs: Sequence[MaskPair]) -> tuple[float, float]:
    """Per-image averaged (mDS, mIoU)."""
    if not pairs:
        raise ContractError("mean_metrics needs at least one mask pair")
    ds = [dice_score(p.P, p.T) for p in pairs]
    ious = [iou(p.P, p.T) for p in pairs]
    return float(np.mean(ds)), float(np.mean(ious))


def dice_loss(probs, target, eps: float = SOFT_EPS, check_range: bool = False) -> Tensor:
    """1 - (2 sum(p t) + eps) / (sum p + sum t + eps), summed over all elements."""
    probs = T.as_tensor(probs)
    target = T.as_tensor(target, probs)
    if probs.shape != target.shape:
        raise DimensionError(f"probs {probs.shape} and target {target.shape} differ")
    if check_range and (probs.data.min() < 0 or probs.data.max() > 1):
        raise ContractError("probabilities outside [0, 1]")
    inter = T.sum_(probs * target)
    total = T.sum_(probs) + T.sum_(target)
    return 1.0 - (2.0 * inter + eps) / (total + eps)


def batch_dice_loss(probs: Tensor, target, eps: float = SOFT_EPS) -> Tensor:
    """Dice loss per sample (leading axis), averaged over the batch."""
    target = T.as_tensor(target, probs)
    axes = tuple(range(1, probs.ndim))
    inter = T.sum_(probs * target, axis=axes)
    total = T.sum_(probs, axis=axes) + T.sum_(target, axis=axes)
    return T.mean(1.0 - (2.0 * inter + eps) / (total + eps))


def metrics_rows(pairs: Iterable[MaskPair]) -> list[tuple[str, float, float]]:
    return [(p.image_id, dice_score(p.P, p.T), iou(p.P, p.T)) for p in pairs]


def write_metrics_csv(pairs: Sequence[MaskPair], fh=None) -> str:
    """``image_id,ds,iou`` rows followed by a ``mean`` summary row."""
    buf = io.StringIO() if fh is None else fh
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "ds", "iou"])
    rows = metrics_rows(pairs)
    for r in rows:
        w.writerow([r[0], f"{r[1]:.6f}", f"{r[2]:.6f}"])
    mds, miou = mean_metrics(pairs)
    w.writerow(["mean", f"{mds:.6f}", f"{miou:.6f}"])
    return buf.getvalue() if fh is None else ""
