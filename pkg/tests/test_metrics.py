import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vmseg import tensor as T
from vmseg.gradcheck import check_gradients
from vmseg.metrics import (MaskPair, batch_dice_loss, dice_loss, dice_score, iou, mean_metrics,
                           write_metrics_csv)
from vmseg.tensor import ContractError, DimensionError, Tensor

P4 = np.array([[1, 1, 1, 1, 0, 0]], dtype=np.uint8)
T4 = np.array([[0, 0, 1, 1, 1, 1]], dtype=np.uint8)   # |P|=4, |T|=4, |P and T|=2

masks = hnp.arrays(np.uint8, st.tuples(st.integers(1, 8), st.integers(1, 8)),
                   elements=st.integers(0, 1))


def test_hand_counts():
    assert dice_score(P4, T4) == 0.5
    assert iou(P4, T4) == pytest.approx(1 / 3, abs=1e-15)


def test_perfect_and_disjoint():
    m = np.eye(4, dtype=np.uint8)
    assert dice_score(m, m) == 1.0 and iou(m, m) == 1.0
    assert dice_score(m, 1 - m) == 0.0 and iou(m, 1 - m) == 0.0


def test_both_empty_is_one():
    z = np.zeros((3, 3), np.uint8)
    assert dice_score(z, z) == 1.0 and iou(z, z) == 1.0


@settings(max_examples=200, deadline=None)
@given(masks, st.integers(0, 2 ** 31))
def test_identity_and_ordering(P, seed):
    T_ = (np.random.default_rng(seed).uniform(size=P.shape) > 0.5).astype(np.uint8)
    if not (P.any() or T_.any()):
        return
    ds, j = dice_score(P, T_), iou(P, T_)
    assert abs(ds - 2 * j / (1 + j)) < 1e-12
    assert j <= ds + 1e-15


def test_rejects_non_binary_and_mismatch():
    with pytest.raises(ContractError):
        dice_score(np.array([0, 2]), np.array([0, 1]))
    with pytest.raises(DimensionError):
        iou(np.zeros(3), np.zeros(4))


def test_bool_masks_accepted():
    assert dice_score(P4.astype(bool), T4.astype(bool)) == 0.5


def test_mean_metrics():
    one = MaskPair(P4, P4)
    zero = MaskPair(P4, T4 * 0 + (1 - P4))
    assert mean_metrics([one]) == (1.0, 1.0)
    assert mean_metrics([one, zero])[0] == 0.5
    with pytest.raises(ContractError):
        mean_metrics([])


def test_mean_matches_loop(rng):
    pairs = [MaskPair((rng.uniform(size=(5, 5)) > 0.5).astype(np.uint8),
                      (rng.uniform(size=(5, 5)) > 0.3).astype(np.uint8)) for _ in range(20)]
    ds = [dice_score(p.P, p.T) for p in pairs]
    ious = [iou(p.P, p.T) for p in pairs]
    assert mean_metrics(pairs) == pytest.approx((sum(ds) / 20, sum(ious) / 20), abs=1e-15)


def test_csv_rows_and_summary():
    pairs = [MaskPair(P4, T4, "a"), MaskPair(P4, P4, "b")]
    text = write_metrics_csv(pairs)
    lines = text.strip().splitlines()
    assert lines[0] == "image_id,ds,iou" and len(lines) == 4
    assert lines[1] == "a,0.500000,0.333333" and lines[-1].startswith("mean,0.750000")
    buf = io.StringIO()
    write_metrics_csv(pairs, buf)
    assert buf.getvalue() == text


# --- soft loss --------------------------------------------------------------

def test_loss_limits(rng):
    t = (rng.uniform(size=(16, 16)) > 0.5).astype(np.float64)
    assert dice_loss(Tensor(t), t).item() == pytest.approx(0.0, abs=1e-12)
    assert dice_loss(Tensor(1 - t), t).item() == pytest.approx(1.0, abs=1e-2)


def test_loss_gradient(rng, f64):
    p = Tensor(rng.uniform(0.05, 0.95, (4, 4)), requires_grad=True)
    t = (rng.uniform(size=(4, 4)) > 0.5).astype(np.float64)
    assert check_gradients(lambda: dice_loss(p, t), [p]) < 1e-5


def test_loss_shape_and_range_checks():
    with pytest.raises(DimensionError):
        dice_loss(Tensor(np.zeros(3)), np.zeros(4))
    with pytest.raises(ContractError):
        dice_loss(Tensor(np.array([1.5])), np.array([1.0]), check_range=True)


def test_batch_loss_is_mean_of_per_sample(rng, f64):
    p = Tensor(rng.uniform(size=(3, 1, 4, 4)), requires_grad=True)
    t = (rng.uniform(size=(3, 1, 4, 4)) > 0.5).astype(np.float64)
    per = [dice_loss(Tensor(p.data[i]), t[i]).item() for i in range(3)]
    assert batch_dice_loss(p, t).item() == pytest.approx(np.mean(per))
    assert check_gradients(lambda: batch_dice_loss(T.sigmoid(p), t), [p]) < 1e-5
