"""Polygon-level detection metrics: IoU, greedy matching, P/R/H-mean, FPS."""

import json
import time
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from . import polygon as P

AREA_EPS = 1e-9


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)
    unmatched_gt: List[int] = field(default_factory=list)
    unmatched_det: List[int] = field(default_factory=list)
    ignored_det: List[int] = field(default_factory=list)
    num_gt: int = 0
    num_det: int = 0

    @property
    def matched(self):
        return len(self.pairs)


def _clip(subject, clipper):
    """Sutherland-Hodgman: part of ``subject`` inside convex ``clipper``
    (both with positive signed area)."""
    out = subject
    n = len(clipper)
    for i in range(n):
        if len(out) == 0:
            break
        ax, ay = clipper[i]
        bx, by = clipper[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        src, out = out, []
        m = len(src)
        for j in range(m):
            px, py = src[j - 1]
            qx, qy = src[j]
            dp = ex * (py - ay) - ey * (px - ax)
            dq = ex * (qy - ay) - ey * (qx - ax)
            if dq >= 0:
                if dp < 0:
                    t = dp / (dp - dq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
                out.append((qx, qy))
            elif dp >= 0:
                t = dp / (dp - dq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def _poly_area(pts):
    s = 0.0
    n = len(pts)
    for i in range(n):
        x1, y1 = pts[i]
        x2, y2 = pts[(i + 1) % n]
        s += x1 * y2 - x2 * y1
    return 0.5 * s


def _fan(pts, origin):
    """Signed triangles (origin, p_i, p_i+1), each stored with positive orientation."""
    tris = []
    n = len(pts)
    for i in range(n):
        a = tuple(origin)
        b = tuple(pts[i])
        c = tuple(pts[(i + 1) % n])
        s = _poly_area([a, b, c])
        if abs(s) < 1e-15:
            continue
        tri = [a, b, c] if s > 0 else [a, c, b]
        xs = (a[0], b[0], c[0])
        ys = (a[1], b[1], c[1])
        tris.append((1.0 if s > 0 else -1.0, tri, min(xs), max(xs), min(ys), max(ys)))
    return tris


def intersection_area(a, b):
    """Exact area of the intersection of two simple polygons.

    Each polygon's indicator is a signed sum of fan triangles from a common
    origin, so the overlap is a signed sum of triangle-triangle overlaps.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sa, sb = P.signed_area(a), P.signed_area(b)
    if abs(sa) < AREA_EPS or abs(sb) < AREA_EPS:
        return 0.0
    lo = np.minimum(a.min(axis=0), b.min(axis=0))
    hi = np.maximum(a.max(axis=0), b.max(axis=0))
    origin = (lo + hi) / 2
    # shift to the origin for better conditioning
    fa = _fan(a - origin, (0.0, 0.0))
    fb = _fan(b - origin, (0.0, 0.0))
    total = 0.0
    for s1, t1, x0, x1, y0, y1 in fa:
        for s2, t2, u0, u1, v0, v1 in fb:
            if x1 <= u0 or u1 <= x0 or y1 <= v0 or v1 <= y0:
                continue
            clipped = _clip(t1, t2)
            if len(clipped) >= 3:
                total += s1 * s2 * _poly_area(clipped)
    total *= np.sign(sa) * np.sign(sb)
    return max(float(total), 0.0)


def polygon_iou(a, b):
    """Intersection over union of two simple polygons, in [0, 1]."""
    area_a = P.area(a)
    area_b = P.area(b)
    if area_a < AREA_EPS:
        area_a = 0.0
    if area_b < AREA_EPS:
        area_b = 0.0
    if area_a == 0.0 or area_b == 0.0:
        return 0.0
    inter = min(intersection_area(a, b), area_a, area_b)
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0))


def _as_points(obj):
    for attr in ("polygon", "boundary"):
        if hasattr(obj, attr):
            return np.asarray(getattr(obj, attr), dtype=np.float64)
    return np.asarray(obj, dtype=np.float64)


def match_detections(gts, dets, iou_threshold=0.5):
    """Greedy one-to-one matching in descending IoU order.

    Ties are broken by lowest gt index, then lowest detection index.
    Unmatched detections that overlap an ignored gt by at least the
    threshold are dropped from the counts.
    """
    gt_pts = [_as_points(g) for g in gts]
    det_pts = [_as_points(d) for d in dets]
    ignore = [bool(getattr(g, "ignore", False)) for g in gts]
    cand = []
    for gi, g in enumerate(gt_pts):
        if ignore[gi]:
            continue
        for di, d in enumerate(det_pts):
            iou = polygon_iou(g, d)
            if iou >= iou_threshold:
                cand.append((-iou, gi, di))
    cand.sort()
    used_g, used_d = set(), set()
    result = MatchResult()
    for neg_iou, gi, di in cand:
        if gi in used_g or di in used_d:
            continue
        used_g.add(gi)
        used_d.add(di)
        result.pairs.append((gi, di, -neg_iou))
    for di, d in enumerate(det_pts):
        if di in used_d:
            continue
        if any(ignore[gi] and polygon_iou(gt_pts[gi], d) >= iou_threshold
               for gi in range(len(gts))):
            result.ignored_det.append(di)
        else:
            result.unmatched_det.append(di)
    result.unmatched_gt = [gi for gi in range(len(gts)) if not ignore[gi] and gi not in used_g]
    result.num_gt = sum(1 for f in ignore if not f)
    result.num_det = len(dets) - len(result.ignored_det)
    return result


def prh(matched, num_gt, num_det):
    """Precision, recall and H-mean from counts (empty sets score 1)."""
    p = matched / num_det if num_det else 1.0
    r = matched / num_gt if num_gt else 1.0
    h = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
    return p, r, h


def match_and_score(gts, dets, iou_threshold=0.5):
    """Match one image and return ``(MatchResult, P, R, H)``."""
    m = match_detections(gts, dets, iou_threshold)
    return (m,) + prh(m.matched, m.num_gt, m.num_det)


def evaluate(pairs, iou_threshold=0.5, fps=None):
    """Dataset report from an iterable of (gts, dets) per image.

    Counts are pooled over images before computing P, R and H.
    """
    per_image = []
    tm = tg = td = 0
    for idx, (gts, dets) in enumerate(pairs):
        m, p, r, h = match_and_score(gts, dets, iou_threshold)
        tm += m.matched
        tg += m.num_gt
        td += m.num_det
        per_image.append({"index": idx, "matched": m.matched, "num_gt": m.num_gt,
                          "num_det": m.num_det, "precision": p, "recall": r, "hmean": h,
                          "ious": [round(iou, 6) for _, _, iou in m.pairs]})
    p, r, h = prh(tm, tg, td)
    return {"precision": p, "recall": r, "hmean": h, "fps": fps, "per_image": per_image}


def report_json(report):
    return json.dumps(report, indent=2, sort_keys=True)


def format_table(rows):
    """Aligned text table with the R / P / H / F columns.

    ``rows`` maps a model name to a report dict (values as fractions).
    """
    header = f"{'Model':<20}{'R':>8}{'P':>8}{'H':>8}{'F':>8}"
    lines = [header, "-" * len(header)]
    for name, rep in rows.items():
        fps = rep.get("fps")
        f = f"{fps:8.1f}" if fps is not None else f"{'-':>8}"
        lines.append(f"{name:<20}{100 * rep['recall']:8.1f}{100 * rep['precision']:8.1f}"
                     f"{100 * rep['hmean']:8.1f}{f}")
    return "\n".join(lines)


def measure_fps(pipeline, images, warmup_count=1):
    """Images per second of ``pipeline(image)`` over the post-warm-up images."""
    images = list(images)
    if len(images) < warmup_count + 1:
        raise ValueError(f"need at least {warmup_count + 1} images, got {len(images)}")
    for img in images[:warmup_count]:
        pipeline(img)
    timed = images[warmup_count:]
    t0 = time.perf_counter()
    for img in timed:
        pipeline(img)
    elapsed = time.perf_counter() - t0
    return len(timed) / max(elapsed, 1e-12)
