"""Fiducial-point geometry codec for arbitrarily shaped text.

A text instance is described by its center line plus, at every center-line
pixel, the character scale ``s`` (half the character height), the text
orientation ``theta`` and the character orientation ``phi``. Orientations
are angles from +x, counter-clockwise in the usual math sense, while image
coordinates have y pointing down; so a direction ``a`` is the image vector
``(cos a, -sin a)``.

:func:`encode_geometry` turns polygon annotations into per-pixel target
maps. :func:`decode` goes back: it traces center lines, samples ``n``
points on each, reads ``s`` and ``phi`` there, and places the two fiducial
points of every sample on either side of the center line.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy import ndimage

from . import polygon as P
from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateOrientationError,
    DimensionError,
    MalformedAnnotationError,
)

log = logging.getLogger(__name__)

# label-generation defaults
SHRINK_RATIO = 0.3
END_RATIO = 0.5
MIN_BAND = 1.0
NODE_SPACING = 2.0

_EIGHT = np.ones((3, 3), dtype=int)


@dataclass
class CharNode:
    c: tuple
    s: float
    phi: float
    theta: float


@dataclass
class TextAnnotation:
    """One text instance. ``top_line`` and ``bottom_line`` both run in
    reading order; when absent they are derived from ``boundary``."""

    boundary: np.ndarray
    top_line: Optional[np.ndarray] = None
    bottom_line: Optional[np.ndarray] = None
    ignore: bool = False
    char_nodes: Optional[List[CharNode]] = None

    def __post_init__(self):
        self.boundary = P.as_polygon(self.boundary)
        if (self.top_line is None) != (self.bottom_line is None):
            raise MalformedAnnotationError("give both top and bottom lines or neither")
        if self.top_line is not None:
            self.top_line = np.asarray(self.top_line, dtype=np.float64).reshape(-1, 2)
            self.bottom_line = np.asarray(self.bottom_line, dtype=np.float64).reshape(-1, 2)
            if len(self.top_line) != len(self.bottom_line):
                raise MalformedAnnotationError("top and bottom lines differ in length")

    @classmethod
    def from_lines(cls, top, bottom, ignore=False):
        top = np.asarray(top, dtype=np.float64).reshape(-1, 2)
        bottom = np.asarray(bottom, dtype=np.float64).reshape(-1, 2)
        return cls(np.concatenate([top, bottom[::-1]]), top, bottom, ignore)

    def lines(self):
        if self.top_line is not None:
            return self.top_line, self.bottom_line
        return split_boundary(self.boundary)

    def transformed(self, fn):
        """Apply ``fn`` (an (N, 2) -> (N, 2) point map) to all geometry."""
        top = None if self.top_line is None else fn(self.top_line)
        bottom = None if self.bottom_line is None else fn(self.bottom_line)
        return replace(self, boundary=fn(self.boundary), top_line=top,
                       bottom_line=bottom, char_nodes=None)


@dataclass
class GeometryMaps:
    """Per-pixel text geometry. ``scale`` maps map pixels to image pixels."""

    tr: np.ndarray
    tcl: np.ndarray
    s_map: np.ndarray
    sin_t: np.ndarray
    cos_t: np.ndarray
    sin_p: np.ndarray
    cos_p: np.ndarray
    scale: float = 1.0

    CHANNELS = ("tr", "tcl", "s_map", "sin_t", "cos_t", "sin_p", "cos_p")

    @property
    def shape(self):
        return self.tr.shape

    @classmethod
    def zeros(cls, shape, scale=1.0):
        return cls(*(np.zeros(shape) for _ in cls.CHANNELS), scale=scale)

    def stack(self):
        return np.stack([np.asarray(getattr(self, k), dtype=np.float64)
                         for k in self.CHANNELS])

    @classmethod
    def from_stack(cls, arr, scale=1.0):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[0] != len(cls.CHANNELS):
            raise DimensionError(f"expected 7 x H x W, got {arr.shape}")
        return cls(*arr, scale=scale)


@dataclass
class DecodedText:
    polygon: np.ndarray
    fiducials: np.ndarray
    centers: np.ndarray
    score: float
    diagnostics: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# polylines


def _dedupe(pts):
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        return pts
    step = np.hypot(*np.diff(pts, axis=0).T)
    return np.concatenate([pts[:1], pts[1:][step > 0]])


def sample_equidistant(chain, n):
    """``n`` points at equal arc-length spacing along ``chain``, endpoints included."""
    if n < 2:
        raise ConfigurationError(f"need n >= 2 sample points, got {n}")
    pts = _dedupe(chain)
    if len(pts) < 2:
        raise ContractError("chain has zero arc length")
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    at = np.linspace(0.0, cum[-1], n)
    return np.stack([np.interp(at, cum, pts[:, 0]), np.interp(at, cum, pts[:, 1])], axis=1)


def rdp(points, epsilon):
    """Ramer-Douglas-Peucker simplification of an open polyline."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        return pts.copy()
    keep = np.zeros(len(pts), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        a, b = stack.pop()
        if b <= a + 1:
            continue
        d = _point_segment_distance(pts[a + 1:b], pts[a], pts[b])
        k = int(np.argmax(d))
        if d[k] > epsilon:
            mid = a + 1 + k
            keep[mid] = True
            stack.append((mid, b))
            stack.append((a, mid))
    return pts[keep]


def _point_segment_distance(pts, a, b):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(*(pts - a).T)
    t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(*(pts - proj).T)


def _direction(vec):
    """Math-convention angle of an image-space vector."""
    return math.atan2(-vec[1], vec[0])


# ---------------------------------------------------------------------------
# annotation -> nodes


def split_boundary(boundary):
    """Split a text polygon into (top, bottom) polylines, both in reading order.

    Head and tail are the pair of non-adjacent edges whose neighbouring edges
    are most antiparallel, that lie far apart along the perimeter, and that
    are short. Reading order is taken to run rightward (upward for vertical
    text).
    """
    pts = P.as_polygon(boundary)
    n = len(pts)
    if n < 4:
        raise MalformedAnnotationError(f"need >= 4 vertices to split, got {n}")
    if P.signed_area(pts) < 0:
        pts = pts[::-1]
    edges = np.roll(pts, -1, axis=0) - pts
    lens = np.hypot(edges[:, 0], edges[:, 1])
    perim = lens.sum()
    if perim <= 0:
        raise MalformedAnnotationError("zero-perimeter polygon")
    unit = edges / lens[:, None]
    antipar = -np.einsum("ij,ij->i", np.roll(unit, 1, axis=0), np.roll(unit, -1, axis=0))
    mids = np.cumsum(lens) - lens / 2
    half = perim / 2
    best, best_pair = -np.inf, None
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            arc = abs(mids[j] - mids[i])
            arc = min(arc, perim - arc)
            score = antipar[i] + antipar[j] + arc / half - (lens[i] + lens[j]) / half
            if score > best + 1e-12:
                best, best_pair = score, (i, j)
    i, j = best_pair
    side_a = pts[i + 1:j + 1]
    side_b = np.concatenate([pts[j + 1:], pts[:i + 1]])
    if len(side_a) < 2 or len(side_b) < 2:
        raise MalformedAnnotationError("cannot tell top from bottom")
    chord = side_a[-1] - side_a[0]
    tol = 1e-9 * max(1.0, float(np.abs(chord).max()))
    rightward = chord[0] > tol or (abs(chord[0]) <= tol and chord[1] < 0)
    top, other = (side_a, side_b) if rightward else (side_b, side_a)
    return top.copy(), other[::-1].copy()


def _paired_lines(top, bottom, per_segment=16):
    """Densely sampled corresponding points on ``top`` and ``bottom``.

    Lines with equal vertex counts are paired vertex by vertex (the
    annotation's own correspondence) and interpolated linearly between;
    otherwise both are resampled at equal arc-length fractions.
    """
    top = _dedupe(top) if len(top) != len(bottom) else np.asarray(top, dtype=np.float64)
    bottom = _dedupe(bottom) if len(top) != len(bottom) else np.asarray(bottom, dtype=np.float64)
    if len(top) != len(bottom) or len(top) < 2:
        k = max(len(top), len(bottom), 2) * per_segment
        return sample_equidistant(top, k), sample_equidistant(bottom, k)
    t = np.linspace(0.0, len(top) - 1, (len(top) - 1) * per_segment + 1)
    idx = np.arange(len(top))
    interp = lambda line: np.stack([np.interp(t, idx, line[:, 0]),
                                    np.interp(t, idx, line[:, 1])], axis=1)
    return interp(top), interp(bottom)


def _node_arrays(top, bottom, m):
    """Centers, scales, phi unit vectors and theta unit vectors for ``m``
    slices spaced evenly along the center line.

    Unit vectors are returned as (cos, sin) in math convention.
    """
    try:
        t_dense, b_dense = _paired_lines(top, bottom)
    except ContractError:
        raise MalformedAnnotationError("top or bottom line has zero length") from None
    mid = (t_dense + b_dense) / 2
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(mid, axis=0).T))])
    if cum[-1] <= 0:
        raise MalformedAnnotationError("center line has zero length")
    at = np.linspace(0.0, cum[-1], m)
    pick = lambda arr: np.stack([np.interp(at, cum, arr[:, 0]), np.interp(at, cum, arr[:, 1])],
                                axis=1)
    t, b = pick(t_dense), pick(b_dense)
    centers = (t + b) / 2
    up = t - b
    s = np.hypot(up[:, 0], up[:, 1]) / 2
    if np.any(s <= 0):
        raise MalformedAnnotationError("top and bottom lines touch")
    phi = np.stack([up[:, 0], -up[:, 1]], axis=1) / (2 * s[:, None])
    step = np.diff(centers, axis=0)
    if len(step) == 0:
        raise MalformedAnnotationError("need at least two slices")
    step = np.concatenate([step, step[-1:]])
    norm = np.hypot(step[:, 0], step[:, 1])
    for k in range(len(norm) - 1, -1, -1):
        if norm[k] == 0:
            # coincident centers: borrow the next (or previous) direction
            src = k + 1 if k + 1 < len(norm) else k - 1
            step[k], norm[k] = step[src], norm[src]
    if np.any(norm == 0):
        raise MalformedAnnotationError("all slice centers coincide")
    theta = np.stack([step[:, 0], -step[:, 1]], axis=1) / norm[:, None]
    return centers, s, phi, theta


def derive_char_nodes(annotation, n):
    """``n`` pseudo-character nodes spread evenly along the instance."""
    if n < 2:
        raise ConfigurationError(f"need n >= 2 nodes, got {n}")
    if not isinstance(annotation, TextAnnotation):
        annotation = TextAnnotation(annotation)
    top, bottom = annotation.lines()
    centers, s, phi, theta = _node_arrays(top, bottom, n)
    return [
        CharNode(c=(float(c[0]), float(c[1])), s=float(si),
                 phi=math.atan2(p[1], p[0]), theta=math.atan2(t[1], t[0]))
        for c, si, p, t in zip(centers, s, phi, theta)
    ]


# ---------------------------------------------------------------------------
# encoding


def _project_onto_polyline(px, py, line, flat_caps=False):
    """Distance from each query point to ``line`` and arc position of the
    closest point. ``line`` is (K, 2); K == 1 means a single point.

    With ``flat_caps`` points lying beyond either end (along the end
    segment's direction) get an infinite distance.
    """
    if len(line) == 1:
        d = np.hypot(px - line[0, 0], py - line[0, 1])
        return d, np.zeros_like(d)
    a = line[:-1]
    ab = line[1:] - a
    seg_len = np.hypot(ab[:, 0], ab[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    qx = px[:, None] - a[None, :, 0]
    qy = py[:, None] - a[None, :, 1]
    denom = np.where(seg_len > 0, seg_len ** 2, 1.0)
    raw = (qx * ab[None, :, 0] + qy * ab[None, :, 1]) / denom
    t = np.clip(raw, 0.0, 1.0)
    dx = qx - t * ab[None, :, 0]
    dy = qy - t * ab[None, :, 1]
    dist = np.hypot(dx, dy)
    k = np.argmin(dist, axis=1)
    rows = np.arange(len(px))
    best = dist[rows, k]
    if flat_caps:
        beyond = (raw[:, 0] < 0) & (k == 0) | (raw[:, -1] > 1) & (k == len(seg_len) - 1)
        best = np.where(beyond, np.inf, best)
    return best, cum[k] + t[rows, k] * seg_len[k]


def _trim(centers, start, end):
    """Sub-polyline between arc positions ``start`` and ``end``."""
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(centers, axis=0).T))])
    if end <= start:
        mid = (start + end) / 2
        pt = [np.interp(mid, cum, centers[:, 0]), np.interp(mid, cum, centers[:, 1])]
        return np.array([pt]), mid
    inner = (cum > start) & (cum < end)
    at = np.concatenate([[start], cum[inner], [end]])
    pts = np.stack([np.interp(at, cum, centers[:, 0]), np.interp(at, cum, centers[:, 1])], axis=1)
    return pts, start


def encode_geometry(annotations, shape, n=8, shrink_ratio=SHRINK_RATIO, end_ratio=END_RATIO,
                    min_band=MIN_BAND, node_spacing=NODE_SPACING):
    """Ground-truth geometry maps for ``annotations`` on an H x W canvas.

    The center-line band has half-width ``max(shrink_ratio * s, min_band)``
    and each end is pulled in by ``end_ratio * s``. ``n`` is the minimum
    number of nodes per instance; long instances get one node every
    ``node_spacing`` pixels. Instances flagged ``ignore`` are skipped.
    Where bands of different instances overlap, the pixel goes to the
    instance whose center line is nearer (lower index on ties).
    """
    h, w = shape
    maps = GeometryMaps.zeros((h, w))
    best = np.full((h, w), np.inf)
    for ann in annotations:
        if ann.ignore:
            continue
        top, bottom = ann.lines()
        region = P.rasterize(ann.boundary, (h, w))
        maps.tr[region] = 1.0
        est_len = (P.polyline_length(top) + P.polyline_length(bottom)) / 2
        m = max(n, int(math.ceil(est_len / node_spacing)) + 1)
        centers, s, phi, theta = _node_arrays(top, bottom, m)
        cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(centers, axis=0).T))])
        band_line, offset = _trim(centers, end_ratio * s[0], cum[-1] - end_ratio * s[-1])
        rows, cols = np.nonzero(region)
        if len(rows) == 0:
            continue
        dist, u = _project_onto_polyline(cols.astype(float), rows.astype(float), band_line,
                                         flat_caps=True)
        u = u + offset
        s_at = np.interp(u, cum, s)
        in_band = dist <= np.maximum(shrink_ratio * s_at, min_band)
        closer = dist < best[rows, cols]
        take = in_band & closer
        r, c, ut = rows[take], cols[take], u[take]
        best[r, c] = dist[take]
        maps.tcl[r, c] = 1.0
        maps.s_map[r, c] = s_at[take]
        for (cos_k, sin_k), vec in (((("cos_t", "sin_t")), theta), ((("cos_p", "sin_p")), phi)):
            vc = np.interp(ut, cum, vec[:, 0])
            vs = np.interp(ut, cum, vec[:, 1])
            norm = np.hypot(vc, vs)
            norm[norm == 0] = 1.0
            getattr(maps, cos_k)[r, c] = vc / norm
            getattr(maps, sin_k)[r, c] = vs / norm
    return maps


# ---------------------------------------------------------------------------
# decoding


def normalize_trig(f_cos, f_sin, eps=1e-9):
    """Scale a raw (cos, sin) regression pair to unit length."""
    norm = np.hypot(f_cos, f_sin)
    if np.any(norm < eps):
        raise DegenerateOrientationError(f"orientation vector norm {np.min(norm):.3g} < {eps}")
    if np.ndim(norm) == 0:
        return float(f_cos / norm), float(f_sin / norm)
    return f_cos / norm, f_sin / norm


def fiducial_points(center, s, phi):
    """Top and bottom fiducial points of one sample.

    ``phi`` may be an angle or a ``(cos, sin)`` pair.
    """
    cx, cy = float(center[0]), float(center[1])
    s = float(s)
    if isinstance(phi, tuple):
        cos_p, sin_p = phi
    else:
        cos_p, sin_p = math.cos(phi), math.sin(phi)
    dx = _snap(s * cos_p, cx)
    dy = _snap(s * sin_p, cy)
    return (cx + dx, cy - dy), (cx - dx, cy + dy)


def _two_sum_exact(a, b):
    s = a + b
    bb = s - a
    return (a - (s - bb)) + (b - bb) == 0.0


def _snap(d, c):
    """Nudge offset ``d`` (by rounding error only) so that ``c + d`` and
    ``c - d`` are both exact and the two points mirror around ``c``.

    Falls back to ``d`` when no such offset exists, which happens only
    when ``|d|`` is far larger than ``|c|``.
    """
    # round one of the two points first, then take the offset it implies
    for snapped in ((c + d) - c, c - (c - d)):
        if _two_sum_exact(c, snapped) and _two_sum_exact(c, -snapped):
            return snapped
    return d


def _bfs(start, index_of, coords):
    """Hop distances and parents from ``start`` over 8-connected pixels."""
    n = len(coords)
    dist = np.full(n, -1, dtype=np.int64)
    parent = np.full(n, -1, dtype=np.int64)
    dist[start] = 0
    queue = deque([start])
    h, w = index_of.shape
    while queue:
        k = queue.popleft()
        r, c = coords[k]
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if (dr or dc) and 0 <= rr < h and 0 <= cc < w:
                    j = index_of[rr, cc]
                    if j >= 0 and dist[j] < 0:
                        dist[j] = dist[k] + 1
                        parent[j] = k
                        queue.append(j)
    return dist, parent


def _trace_component(coords, shape):
    """Ordered center points of one pixel component (coords in raster order)."""
    index_of = np.full(shape, -1, dtype=np.int64)
    index_of[coords[:, 0], coords[:, 1]] = np.arange(len(coords))
    d0, _ = _bfs(0, index_of, coords)
    a = int(np.argmax(d0))
    da, parent = _bfs(a, index_of, coords)
    b = int(np.argmax(da))
    path = [b]
    while path[-1] != a:
        path.append(int(parent[path[-1]]))
    path = np.array(path[::-1])
    return _recenter(coords[path][:, ::-1].astype(float), coords[:, ::-1].astype(float))


def _recenter(path, xy):
    """Shift each path point sideways onto the local centroid of the
    component pixels ``xy``; points never move along the path."""
    if len(path) < 2:
        return path
    length = P.polyline_length(path)
    _, u = _project_onto_polyline(xy[:, 0], xy[:, 1], path)
    up = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(path, axis=0).T))])
    sigma = max(2.0, 0.75 * len(xy) / max(length, 1.0))
    wts = np.exp(-0.5 * ((u[None, :] - up[:, None]) / sigma) ** 2)
    # offsets relative to each path point, so an already centered point gets exactly 0
    offset = np.stack([(wts * (xy[None, :, 0] - path[:, None, 0])).sum(axis=1),
                       (wts * (xy[None, :, 1] - path[:, None, 1])).sum(axis=1)], axis=1)
    offset /= wts.sum(axis=1, keepdims=True)
    r = max(1, int(round(sigma)))
    k = np.arange(len(path))
    tangent = path[np.minimum(k + r, len(path) - 1)] - path[np.maximum(k - r, 0)]
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    normal /= np.maximum(np.hypot(normal[:, 0], normal[:, 1]), 1e-12)[:, None]
    shift = np.einsum("ij,ij->i", offset, normal)
    return path + shift[:, None] * normal


def _components(mask):
    labels, count = ndimage.label(mask, structure=_EIGHT)
    if count == 0:
        return labels, []
    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols]
    order = np.argsort(lab, kind="stable")
    bounds = np.searchsorted(lab[order], np.arange(1, count + 2))
    comps = []
    for k in range(count):
        sel = order[bounds[k]:bounds[k + 1]]
        comps.append(np.stack([rows[sel], cols[sel]], axis=1))
    return labels, comps


def extract_center_lines(tcl, tr, t_tr=0.7, t_tcl=0.6, min_area=5):
    """Ordered (x, y) point chains, one per center-line component."""
    tcl = np.asarray(tcl)
    tr = np.asarray(tr)
    if tcl.shape != tr.shape:
        raise DimensionError(f"tcl {tcl.shape} and tr {tr.shape} differ")
    mask = (tcl >= t_tcl) & (tr >= t_tr)
    _, comps = _components(mask)
    return [_trace_component(c, mask.shape) for c in comps if len(c) >= min_area]


def refine_center_line(chain, comp):
    """Re-center an ordered chain on its component and square off its ends.

    Each chain point becomes a centroid of the component pixels, weighted
    by a Gaussian in arc position along ``chain``. Each end is then moved
    out along the interior tangent to the farthest pixel plus half a pixel
    of coverage, and sideways onto the centroid of the end-cap pixels.
    """
    xy = comp[:, ::-1].astype(float)
    length = P.polyline_length(chain)
    if length < 2.0:
        return chain
    _, u = _project_onto_polyline(xy[:, 0], xy[:, 1], _dedupe(chain))
    half_width = len(comp) / length / 2
    sigma = max(2.0, 1.5 * half_width)
    uk = np.linspace(0.0, length, max(int(round(length)), 2))
    wts = np.exp(-0.5 * ((u[None, :] - uk[:, None]) / sigma) ** 2)
    line = (wts @ xy) / wts.sum(axis=1, keepdims=True)
    line = _dedupe(line)
    total = P.polyline_length(line)
    inset = half_width + 1.0
    reach = max(4.0, 3 * half_width)
    if total < 2 * inset + 2 * reach:
        return line
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(line, axis=0).T))])
    ends = []
    for forward in (False, True):
        pts = line[::-1] if forward else line
        q = _arc_point(pts, inset)
        back = _arc_point(pts, inset + reach)
        t = q - back
        t /= max(np.hypot(*t), 1e-12)
        rel = xy - q
        near = np.hypot(rel[:, 0], rel[:, 1]) <= inset + 2 * half_width + 2
        along = rel[near] @ t
        top = max(float(along.max()), 0.0)
        # lateral position from the end-cap pixels, not from extrapolation
        cap = along >= top - 1.0
        normal = np.array([-t[1], t[0]])
        side = float(np.mean(rel[near][cap] @ normal)) if cap.any() else 0.0
        ends.append(q + t * (top + 0.5) + normal * side)
    keep = (cum > inset) & (cum < cum[-1] - inset)
    return np.concatenate([ends[0][None], line[keep], ends[1][None]])


def _arc_point(chain, dist_along):
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(chain, axis=0).T))])
    d = min(dist_along, cum[-1])
    return np.array([np.interp(d, cum, chain[:, 0]), np.interp(d, cum, chain[:, 1])])


class _Reader:
    """Attribute readout over the 3x3 valid neighbourhood of a point."""

    def __init__(self, maps, valid, comp):
        self.maps = maps
        self.valid = valid
        self.comp = comp  # (K, 2) rows/cols of this component

    def read(self, x, y):
        h, w = self.valid.shape
        r, c = int(round(y)), int(round(x))
        r0, r1 = max(r - 1, 0), min(r + 2, h)
        c0, c1 = max(c - 1, 0), min(c + 2, w)
        sel = self.valid[r0:r1, c0:c1] if r0 < r1 and c0 < c1 else np.zeros((0, 0), bool)
        if sel.any():
            rr, cc = np.nonzero(sel)
            rr, cc = rr + r0, cc + c0
        else:
            d = (self.comp[:, 0] - y) ** 2 + (self.comp[:, 1] - x) ** 2
            rr, cc = self.comp[[int(np.argmin(d))]].T
        m = self.maps
        return (float(np.mean(m.s_map[rr, cc])), float(np.mean(m.cos_p[rr, cc])),
                float(np.mean(m.sin_p[rr, cc])), float(np.mean(m.tcl[rr, cc])))


def _extend_chain(chain, s_start, s_end, phi_start, phi_end, end_ratio):
    """Push both chain ends outward by ``end_ratio * s`` to undo the band shrink."""
    length = P.polyline_length(chain)
    if length >= 1.0:
        back = _arc_point(chain, min(length / 2, max(2.0, s_start)))
        d0 = chain[0] - back
        fwd = _arc_point(chain[::-1], min(length / 2, max(2.0, s_end)))
        d1 = chain[-1] - fwd
    else:
        # no usable tangent: go perpendicular to the character direction
        d0 = np.array([-phi_start[1], -phi_start[0]])
        d1 = np.array([phi_end[1], phi_end[0]])
    d0 = d0 / max(np.hypot(*d0), 1e-12)
    d1 = d1 / max(np.hypot(*d1), 1e-12)
    head = chain[0] + end_ratio * s_start * d0
    tail = chain[-1] + end_ratio * s_end * d1
    return np.concatenate([head[None], chain, tail[None]])


def _safe_phi(cos_p, sin_p):
    try:
        return normalize_trig(cos_p, sin_p)
    except DegenerateOrientationError:
        return None


def _decode_chain(chain, comp, maps, valid, n, dp_epsilon, end_ratio):
    reader = _Reader(maps, valid, comp)
    notes = []
    s0, c0, sn0, _ = reader.read(*chain[0])
    s1, c1, sn1, _ = reader.read(*chain[-1])
    phi0 = _safe_phi(c0, sn0) or (0.0, 1.0)
    phi1 = _safe_phi(c1, sn1) or (0.0, 1.0)
    extended = _extend_chain(chain, s0, s1, phi0, phi1, end_ratio)
    samples = sample_equidistant(extended, n)
    scales, phis, tcls = [], [], []
    for x, y in samples:
        k = int(np.argmin((chain[:, 0] - x) ** 2 + (chain[:, 1] - y) ** 2))
        s, cp, sp, t = reader.read(*chain[k])
        scales.append(max(s, 0.0))
        phis.append(_safe_phi(cp, sp))
        tcls.append(t)
    if all(p is None for p in phis):
        return None, ["orientation degenerate at every sample point"]
    for i, p in enumerate(phis):
        if p is not None:
            continue
        neigh = [q for q in (phis[i - 1] if i > 0 else None,
                             phis[i + 1] if i + 1 < n else None) if q is not None]
        if not neigh:
            neigh = [q for q in phis if q is not None]
        vc = sum(q[0] for q in neigh)
        vs = sum(q[1] for q in neigh)
        phis[i] = _safe_phi(vc, vs) or neigh[0]
        notes.append(f"sample {i}: degenerate orientation replaced by neighbour average")
    fid = np.zeros((2 * n, 2))
    for i, ((x, y), s, p) in enumerate(zip(samples, scales, phis)):
        top, bottom = fiducial_points((x, y), s, p)
        fid[2 * i] = top
        fid[2 * i + 1] = bottom
    tops = fid[0::2]
    bottoms = fid[1::2][::-1]
    polygon = np.concatenate([rdp(tops, dp_epsilon), rdp(bottoms, dp_epsilon)])
    return DecodedText(polygon=polygon * maps.scale, fiducials=fid * maps.scale,
                       centers=samples * maps.scale, score=float(np.mean(tcls)),
                       diagnostics=notes), notes


def decode_instances(maps, n=8, t_tr=0.7, t_tcl=0.6, dp_epsilon=1.0, min_area=5,
                     end_ratio=END_RATIO, max_instances=None, diagnostics=None):
    """Decode geometry maps into :class:`DecodedText` records.

    ``max_instances`` keeps only the largest center-line components.
    Problems are appended to ``diagnostics`` (if given) and logged.
    """
    if n < 2:
        raise ConfigurationError(f"need n >= 2 sample points, got {n}")
    mask = (np.asarray(maps.tcl) >= t_tcl) & (np.asarray(maps.tr) >= t_tr)
    _, comps = _components(mask)
    comps = [c for c in comps if len(c) >= min_area]
    if max_instances is not None:
        order = sorted(range(len(comps)), key=lambda k: (-len(comps[k]), k))
        comps = [comps[k] for k in sorted(order[:max_instances])]
    out = []
    for idx, comp in enumerate(comps):
        chain = refine_center_line(_trace_component(comp, mask.shape), comp)
        result, notes = _decode_chain(chain, comp, maps, mask, n, dp_epsilon, end_ratio)
        for note in notes:
            msg = f"instance {idx}: {note}"
            log.debug(msg)
            if diagnostics is not None:
                diagnostics.append(msg)
        if result is not None:
            out.append(result)
    return out


def decode(maps, n=8, t_tr=0.7, t_tcl=0.6, dp_epsilon=1.0, **kwargs):
    """Decode geometry maps into text polygons (image coordinates)."""
    return [d.polygon for d in decode_instances(maps, n, t_tr, t_tcl, dp_epsilon, **kwargs)]
