import math

import numpy as np
import pytest

from nask import tensor as T
from nask.errors import DimensionError
from nask.geometry import GeometryMaps
from nask.losses import (
    TERMS,
    LossWeights,
    PredictedMaps,
    cross_entropy,
    ohem_cross_entropy,
    ohem_selection,
    relative_smoothed_l1,
    smoothed_l1,
    total_loss,
)
from nask.tensor import Tape, Tensor


def random_gt(rng, shape, p_tr=0.4):
    tr = (rng.random(shape) < p_tr).astype(float)
    tcl = tr * (rng.random(shape) < 0.5)
    s = rng.uniform(1, 12, shape)
    t = rng.uniform(-np.pi, np.pi, shape)
    p = rng.uniform(-np.pi, np.pi, shape)
    return GeometryMaps(tr, tcl, s, np.sin(t), np.cos(t), np.sin(p), np.cos(p))


def random_pred(rng, shape, requires_grad=False):
    def t(arr):
        return Tensor(arr, requires_grad=requires_grad)
    return PredictedMaps(
        tr=t(rng.uniform(0.05, 0.95, shape)),
        tcl=t(rng.uniform(0.05, 0.95, shape)),
        s_map=t(rng.uniform(0.5, 14, shape)),
        sin_t=t(rng.uniform(-1.5, 1.5, shape)),
        cos_t=t(rng.uniform(-1.5, 1.5, shape)),
        sin_p=t(rng.uniform(-1.5, 1.5, shape)),
        cos_p=t(rng.uniform(-1.5, 1.5, shape)),
    )


def pred_from(gt):
    return PredictedMaps(*(Tensor(np.array(getattr(gt, c), float)) for c in GeometryMaps.CHANNELS))


# --- independent reference ----------------------------------------------------

def ref_ce(p, g):
    p = min(max(p, 1e-7), 1 - 1e-7)
    return -(g * math.log(p) + (1 - g) * math.log(1 - p))


def ref_ohem(pred, gt, ratio=3):
    pos = [ref_ce(p, g) for p, g in zip(pred.ravel(), gt.ravel()) if g > 0.5]
    neg = sorted((ref_ce(p, g) for p, g in zip(pred.ravel(), gt.ravel()) if g <= 0.5), reverse=True)
    k = ratio * len(pos) if pos else max(64, len(neg) // 100)
    kept = pos + neg[:k]
    return sum(kept) / len(kept)


def ref_sl1(d):
    return 0.5 * d * d if abs(d) < 1 else abs(d) - 0.5


def ref_total(pred, gt):
    p = {c: pred_arr(pred, c).ravel() for c in GeometryMaps.CHANNELS}
    g = {c: np.asarray(getattr(gt, c)).ravel() for c in GeometryMaps.CHANNELS}
    total = ref_ohem(p["tr"], g["tr"])
    region = [i for i in range(len(g["tr"])) if g["tr"][i] > 0.5]
    total += sum(ref_ce(p["tcl"][i], g["tcl"][i]) for i in region) / max(1, len(region))
    tcl = [i for i in range(len(g["tcl"])) if g["tcl"][i] > 0.5]
    n = max(1, len(tcl))
    total += sum(ref_sl1((p["s_map"][i] - g["s_map"][i]) / g["s_map"][i]) for i in tcl) / n
    for c in ("sin_t", "cos_t", "sin_p", "cos_p"):
        total += sum(ref_sl1(p[c][i] - g[c][i]) for i in tcl) / n
    return total


def pred_arr(pred, c):
    return getattr(pred, c).data


# --- OHEM -----------------------------------------------------------------------

def test_ohem_perfect_prediction():
    gt = (np.random.default_rng(0).random((16, 16)) < 0.3).astype(float)
    assert ohem_cross_entropy(gt, gt).item() <= 1e-6


@pytest.mark.parametrize("frac", [0.0, 0.1, 0.5, 1.0])
def test_ohem_half_is_ln2(frac):
    gt = (np.random.default_rng(1).random((20, 20)) < frac).astype(float)
    assert abs(ohem_cross_entropy(np.full(gt.shape, 0.5), gt).item() - math.log(2)) < 1e-9


@pytest.mark.parametrize("seed", range(12))
def test_ohem_matches_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(4, 40, 2))
    gt = (rng.random(shape) < rng.choice([0.0, 0.02, 0.2, 0.6])).astype(float)
    pred = rng.random(shape)
    assert ohem_cross_entropy(pred, gt).item() == pytest.approx(ref_ohem(pred, gt), abs=1e-12)


def test_ohem_selection_counts():
    gt = np.zeros((10, 10))
    gt[0, :5] = 1
    losses = np.arange(100, dtype=float)
    keep = ohem_selection(losses, gt)
    assert keep.sum() == 5 + 15
    # the 15 largest negative losses are the last 15 pixels
    assert keep.ravel()[-15:].all() and not keep.ravel()[5:85].any()


def test_ohem_no_positives_rule():
    gt = np.zeros((100, 100))
    keep = ohem_selection(np.random.default_rng(0).random(gt.shape), gt)
    assert keep.sum() == 100  # max(64, 10000 // 100)
    small = np.zeros((5, 5))
    assert ohem_selection(np.zeros(small.shape), small).sum() == 25


def test_ohem_ties_by_raster_order():
    gt = np.zeros((2, 4))
    gt[0, 0] = 1
    keep = ohem_selection(np.zeros(gt.shape), gt, neg_pos_ratio=2)
    assert keep.ravel().tolist() == [True, True, True] + [False] * 5


def test_ohem_shape_mismatch():
    with pytest.raises(DimensionError):
        ohem_cross_entropy(np.full((4, 4), 0.5), np.zeros((4, 5)))
    with pytest.raises(DimensionError):
        cross_entropy(np.full((4, 4), 0.5), np.zeros((5, 4)))


# --- smoothed L1 ----------------------------------------------------------------

def test_smoothed_l1_examples():
    one = np.ones((1, 1), bool)
    assert smoothed_l1(np.full((4, 4), 2.0), np.full((4, 4), 2.0), np.ones((4, 4), bool)).item() == 0.0
    assert smoothed_l1(np.array([[0.5]]), np.zeros((1, 1)), one).item() == 0.125
    assert smoothed_l1(np.array([[3.0]]), np.zeros((1, 1)), one).item() == 2.5


def test_smoothed_l1_mask_divisor():
    pred = np.array([[1.0, 0.5, 9.0]])
    mask = np.array([[True, True, False]])
    assert smoothed_l1(pred, np.zeros((1, 3)), mask).item() == pytest.approx((0.5 + 0.125) / 2)
    assert smoothed_l1(pred, np.zeros((1, 3)), np.zeros((1, 3), bool)).item() == 0.0


def test_smoothed_l1_shape_mismatch():
    with pytest.raises(DimensionError):
        smoothed_l1(np.zeros((2, 2)), np.zeros((2, 3)), np.ones((2, 2), bool))


def test_relative_scale_excludes_zero_gt():
    gt = np.array([[4.0, 0.0, 2.0]])
    pred = np.array([[6.0, 5.0, 2.0]])
    loss, excluded = relative_smoothed_l1(pred, gt, np.ones((1, 3), bool))
    assert excluded == 1
    assert loss.item() == pytest.approx(0.125 / 2)


# --- total loss -------------------------------------------------------------------

def test_total_zero_when_pred_equals_gt():
    gt = random_gt(np.random.default_rng(2), (16, 16))
    rep = total_loss(pred_from(gt), gt)
    vals = rep.values()
    assert set(vals) == set(TERMS) | {"total"}
    # cross-entropy of a clamped perfect prediction is about 1e-7
    for name in TERMS:
        assert vals[name] <= 1e-6
    for name in ("L_s", "L_sin_t", "L_cos_t", "L_sin_p", "L_cos_p"):
        assert vals[name] == 0.0
    assert vals["total"] <= 1e-5


def test_total_zero_weights():
    rng = np.random.default_rng(3)
    gt = random_gt(rng, (16, 16))
    zero = LossWeights(*(0.0,) * 7)
    assert total_loss(random_pred(rng, (16, 16)), gt, zero).total.item() == 0.0


def test_weights_validation():
    assert LossWeights().as_tuple() == (1.0,) * 7
    with pytest.raises(ValueError):
        LossWeights(s=-1.0)


@pytest.mark.parametrize("seed", range(5))
def test_total_matches_reference(seed):
    rng = np.random.default_rng(seed)
    gt = random_gt(rng, (16, 16))
    pred = random_pred(rng, (16, 16))
    rep = total_loss(pred, gt)
    assert abs(rep.total.item() - ref_total(pred, gt)) < 1e-9
    w = LossWeights(*rng.uniform(0, 2, 7))
    weighted = sum(wi * rep.values()[n] for wi, n in zip(w.as_tuple(), TERMS))
    assert total_loss(pred, gt, w).total.item() == pytest.approx(weighted, abs=1e-12)


def test_total_nonnegative():
    rng = np.random.default_rng(9)
    for _ in range(10):
        assert total_loss(random_pred(rng, (8, 8)), random_gt(rng, (8, 8))).total.item() >= 0


def test_geometry_terms_ignore_pred_outside_mask():
    rng = np.random.default_rng(4)
    gt = random_gt(rng, (16, 16))
    pred = random_pred(rng, (16, 16))
    base = total_loss(pred, gt).values()
    outside_tcl = gt.tcl <= 0.5
    outside_tr = gt.tr <= 0.5
    for c in ("s_map", "sin_t", "cos_t", "sin_p", "cos_p"):
        getattr(pred, c).data[outside_tcl] = rng.choice([np.inf, np.nan, -1e9, 0.0])
    pred.tcl.data[outside_tr] = np.nan
    after = total_loss(pred, gt).values()
    for name in TERMS[1:]:
        assert after[name] == base[name]


def test_zero_gt_scale_reported():
    gt = random_gt(np.random.default_rng(5), (8, 8))
    gt.tcl[0, 0] = 1.0
    gt.tr[0, 0] = 1.0
    gt.s_map[0, 0] = 0.0
    rep = total_loss(random_pred(np.random.default_rng(6), (8, 8)), gt)
    assert rep.excluded_scale_pixels == 1
    assert np.isfinite(rep.total.item())


# --- gradients ----------------------------------------------------------------------

def test_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    gt = random_gt(rng, (8, 8), p_tr=0.5)
    pred = random_pred(rng, (8, 8), requires_grad=True)
    for name in TERMS:
        for c in GeometryMaps.CHANNELS:
            getattr(pred, c).grad = None
        with Tape() as tape:
            term = total_loss(pred, gt).terms[name]
        if not term.requires_grad:
            continue
        T.backward(tape, term)
        for c in GeometryMaps.CHANNELS:
            t = getattr(pred, c)
            if t.grad is None:
                continue
            num = np.zeros(t.shape)
            h = 1e-6
            for idx in np.ndindex(t.shape):
                old = t.data[idx]
                t.data[idx] = old + h
                up = total_loss(pred, gt).terms[name].item()
                t.data[idx] = old - h
                down = total_loss(pred, gt).terms[name].item()
                t.data[idx] = old
                num[idx] = (up - down) / (2 * h)
            scale = max(np.abs(num).max(), 1e-8)
            assert np.abs(t.grad - num).max() / scale < 1e-4, (name, c)
