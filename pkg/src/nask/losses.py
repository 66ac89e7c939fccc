"""Training objective: OHEM cross-entropy on the text-region map, plain
cross-entropy on the center line, smoothed L1 on the five geometry channels.
"""

import logging
from dataclasses import dataclass, fields
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
NEG_POS_RATIO = 3
MIN_HARD_NEGATIVES = 64

TERMS = ("L_TIS", "L_tcl", "L_s", "L_sin_t", "L_cos_t", "L_sin_p", "L_cos_p")


@dataclass(frozen=True)
class LossWeights:
    tis: float = 1.0
    tcl: float = 1.0
    s: float = 1.0
    sin_t: float = 1.0
    cos_t: float = 1.0
    sin_p: float = 1.0
    cos_p: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")

    def as_tuple(self):
        return tuple(getattr(self, f.name) for f in fields(self))


@dataclass
class PredictedMaps:
    """Network outputs as tensors; same channel names as GeometryMaps."""

    tr: Tensor
    tcl: Tensor
    s_map: Tensor
    sin_t: Tensor
    cos_t: Tensor
    sin_p: Tensor
    cos_p: Tensor


@dataclass
class LossReport:
    terms: Dict[str, Tensor]
    total: Tensor
    excluded_scale_pixels: int = 0

    def values(self):
        out = {k: float(v.item()) for k, v in self.terms.items()}
        out["total"] = float(self.total.item())
        return out


def _pixel_ce(pred, gt):
    """Per-pixel binary cross-entropy with the prediction clamped into (0, 1)."""
    p = T.clamp(pred, PROB_EPS, 1.0 - PROB_EPS)
    g = Tensor(gt)
    return T.neg(T.mul(g, T.log(p)) + T.mul(Tensor(1.0 - gt), T.log(1.0 - p)))


def _masked_mean(values, keep):
    # an empty selection sums to 0 and never reads the unselected values
    return values[keep].sum() * (1.0 / max(1, int(np.count_nonzero(keep))))


def ohem_selection(losses, gt, neg_pos_ratio=NEG_POS_RATIO):
    """Boolean mask of pixels kept by hard example mining.

    All positives are kept; negatives are ranked by loss (ties by raster
    index) and the top ``neg_pos_ratio * #pos`` kept. With no positives the
    hardest ``max(64, #neg // 100)`` negatives are kept.
    """
    pos = gt > 0.5
    n_pos = int(pos.sum())
    neg_idx = np.flatnonzero(~pos)
    if n_pos > 0:
        k = min(neg_pos_ratio * n_pos, len(neg_idx))
    else:
        k = min(max(MIN_HARD_NEGATIVES, len(neg_idx) // 100), len(neg_idx))
    order = np.argsort(-losses.reshape(-1)[neg_idx], kind="stable")
    keep = pos.reshape(-1).copy()
    keep[neg_idx[order[:k]]] = True
    return keep.reshape(gt.shape)


def ohem_cross_entropy(pred, gt, neg_pos_ratio=NEG_POS_RATIO):
    """Mean cross-entropy over positives plus the hardest negatives."""
    pred = T.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"ohem: pred {pred.shape} vs gt {gt.shape}")
    ce = _pixel_ce(pred, gt)
    keep = ohem_selection(ce.data, gt, neg_pos_ratio)
    return _masked_mean(ce, keep)


def cross_entropy(pred, gt, region=None):
    """Mean cross-entropy, optionally restricted to ``region``."""
    pred = T.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"cross_entropy: pred {pred.shape} vs gt {gt.shape}")
    keep = np.ones(gt.shape, bool) if region is None else np.asarray(region, bool)
    return _masked_mean(_pixel_ce(pred, gt), keep)


def smoothed_l1(pred, gt, mask):
    """Smoothed L1 summed over ``mask`` and divided by ``max(1, #mask)``."""
    pred = T.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, bool)
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise DimensionError(f"smoothed_l1: {pred.shape}, {gt.shape}, {mask.shape}")
    d = pred[mask] - Tensor(gt[mask])
    return _masked_mean(T.smooth_l1(d), np.ones(d.shape, bool))


def relative_smoothed_l1(pred, gt, mask):
    """Smoothed L1 on ``(pred - gt) / gt``; returns (loss, #pixels dropped
    because gt is 0)."""
    pred = T.as_tensor(pred)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, bool)
    bad = mask & (gt == 0)
    keep = mask & ~bad
    d = (pred[keep] - Tensor(gt[keep])) * Tensor(1.0 / gt[keep])
    return _masked_mean(T.smooth_l1(d), np.ones(d.shape, bool)), int(bad.sum())


def fox_terms(pred, gt):
    """Center-line and geometry terms. Returns (dict, excluded count)."""
    region = np.asarray(gt.tr) > 0.5
    tcl_mask = np.asarray(gt.tcl) > 0.5
    terms = {"L_tcl": cross_entropy(pred.tcl, gt.tcl, region)}
    terms["L_s"], excluded = relative_smoothed_l1(pred.s_map, gt.s_map, tcl_mask)
    for ch in ("sin_t", "cos_t", "sin_p", "cos_p"):
        terms[f"L_{ch}"] = smoothed_l1(getattr(pred, ch), getattr(gt, ch), tcl_mask)
    if excluded:
        log.warning("scale term: %d masked pixels with zero target scale excluded", excluded)
    return terms, excluded


def combine(terms, weights: LossWeights):
    """Weighted sum of the seven terms in fixed order."""
    total = None
    for name, w in zip(TERMS, weights.as_tuple()):
        part = terms[name] * float(w)
        total = part if total is None else total + part
    return total


def total_loss(pred: PredictedMaps, gt, weights: Optional[LossWeights] = None,
               tis_pred=None, tis_gt=None):
    """Full objective. ``tis_pred``/``tis_gt`` override ``pred.tr``/``gt.tr``
    for the text-region term when it lives at another resolution."""
    weights = weights or LossWeights()
    terms, excluded = fox_terms(pred, gt)
    tr_pred = pred.tr if tis_pred is None else tis_pred
    tr_gt = gt.tr if tis_gt is None else tis_gt
    terms = {"L_TIS": ohem_cross_entropy(tr_pred, tr_gt), **terms}
    return LossReport(terms=terms, total=combine(terms, weights), excluded_scale_pixels=excluded)
