"""Synthetic curved-text samples, annotation file formats and augmentation."""

import json
import math
import os
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy import ndimage

from . import polygon as P
from .errors import MalformedAnnotationError, ParseError
from .geometry import TextAnnotation

NOISE_SIGMA = 0.05
CTW_VERTICES = 14


@dataclass
class RibbonSpec:
    """A text ribbon: a cubic Bezier center line thickened by ``half_thickness``."""

    control: np.ndarray  # 4 x 2 control points (x, y)
    half_thickness: float
    char_count: int = 6
    seed: int = 0

    @property
    def length(self):
        return P.polyline_length(bezier(self.control, 256))


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W
    annotations: List[TextAnnotation]

    @property
    def shape(self):
        return self.image.shape[1:]


def bezier(control, count):
    control = np.asarray(control, dtype=np.float64)
    t = np.linspace(0.0, 1.0, count)[:, None]
    p0, p1, p2, p3 = control
    return ((1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1
            + 3 * (1 - t) * t ** 2 * p2 + t ** 3 * p3)


def ribbon_annotation(spec: RibbonSpec):
    """Boundary annotation of a ribbon, with ``2 * char_count`` points per side.

    Raises MalformedAnnotationError if offsetting the center line by the
    half thickness folds the outline over itself.
    """
    dense = bezier(spec.control, 512)
    seg = np.hypot(*np.diff(dense, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] <= 0:
        raise MalformedAnnotationError("ribbon center line has zero length")
    m = max(2 * spec.char_count, 2)
    at = np.linspace(0.0, cum[-1], m)
    center = np.stack([np.interp(at, cum, dense[:, 0]), np.interp(at, cum, dense[:, 1])], axis=1)
    # tangents from the dense curve for accuracy at the ends
    tan_dense = np.gradient(dense, axis=0)
    tangent = np.stack([np.interp(at, cum, tan_dense[:, 0]), np.interp(at, cum, tan_dense[:, 1])], axis=1)
    tangent /= np.hypot(tangent[:, 0], tangent[:, 1])[:, None]
    # curvature radius must exceed the half thickness
    ang = np.unwrap(np.arctan2(tan_dense[:, 1], tan_dense[:, 0]))
    curvature = np.abs(np.gradient(ang)) / np.maximum(np.gradient(cum), 1e-12)
    if np.max(curvature) * spec.half_thickness >= 1.0:
        raise MalformedAnnotationError(
            f"ribbon folds: curvature radius {1 / np.max(curvature):.2f} "
            f"<= half thickness {spec.half_thickness:.2f}")
    up = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
    top = center + spec.half_thickness * up
    bottom = center - spec.half_thickness * up
    ann = TextAnnotation.from_lines(top, bottom)
    if not P.is_simple(ann.boundary):
        raise MalformedAnnotationError("ribbon outline self-intersects")
    return ann


def generate_sample(specs, canvas=(128, 128), seed=0, noise=NOISE_SIGMA):
    """Render ribbons as flat-colored regions on a noisy background."""
    h, w = canvas
    rng = np.random.default_rng(seed)
    annotations = [ribbon_annotation(s) for s in specs]
    for ann in annotations:
        b = ann.boundary
        if b[:, 0].min() < 0 or b[:, 1].min() < 0 or b[:, 0].max() > w - 1 or b[:, 1].max() > h - 1:
            raise MalformedAnnotationError("ribbon leaves the canvas")
    background = rng.uniform(0.0, 0.35, size=3)
    image = np.empty((3, h, w))
    image[:] = background[:, None, None]
    for ann in annotations:
        color = rng.uniform(0.65, 1.0, size=3)
        mask = P.rasterize(ann.boundary, (h, w))
        image[:, mask] = color[:, None]
    image += rng.normal(scale=noise, size=image.shape)
    return Sample(image=image, annotations=annotations)


def random_ribbon_spec(rng, canvas=(128, 128), length=(45.0, 95.0), half_thickness=(5.0, 9.0),
                       bend=0.6, margin=4.0):
    """Draw a random ribbon that fits the canvas; resamples until valid."""
    h, w = canvas
    for _ in range(200):
        ln = rng.uniform(*length)
        ht = rng.uniform(*half_thickness)
        angle = rng.uniform(-0.5, 0.5)
        d = np.array([math.cos(angle), math.sin(angle)])
        n = np.array([-d[1], d[0]])
        mid = np.array([rng.uniform(0, w), rng.uniform(0, h)])
        p0 = mid - d * ln / 2
        p3 = mid + d * ln / 2
        k1, k2 = rng.uniform(-bend, bend, size=2) * ln
        p1 = p0 + d * ln / 3 + n * k1
        p2 = p0 + 2 * d * ln / 3 + n * k2
        spec = RibbonSpec(np.array([p0, p1, p2, p3]), ht, int(rng.integers(4, 9)),
                          int(rng.integers(0, 2**31)))
        try:
            ann = ribbon_annotation(spec)
        except MalformedAnnotationError:
            continue
        b = ann.boundary
        if (b[:, 0].min() >= margin and b[:, 1].min() >= margin
                and b[:, 0].max() <= w - 1 - margin and b[:, 1].max() <= h - 1 - margin):
            return spec
    raise MalformedAnnotationError("could not place a ribbon on the canvas")


def random_sample(seed, canvas=(128, 128), max_instances=2, gap=6, **ribbon_kw):
    """A sample with 1..max_instances non-touching ribbons."""
    rng = np.random.default_rng(seed)
    want = int(rng.integers(1, max_instances + 1))
    specs, occupied = [], np.zeros(canvas, dtype=bool)
    for _ in range(50 * want):
        if len(specs) == want:
            break
        spec = random_ribbon_spec(rng, canvas, **ribbon_kw)
        mask = P.rasterize(ribbon_annotation(spec).boundary, canvas)
        grown = ndimage.binary_dilation(mask, iterations=gap)
        if not (grown & occupied).any():
            specs.append(spec)
            occupied |= mask
    return generate_sample(specs, canvas, seed=int(rng.integers(0, 2**31)))


# ---------------------------------------------------------------------------
# text formats


def _tokens(line):
    return [t.strip() for t in line.strip().split(",")]


def parse_ctw_polygons(text):
    """Parse CTW-style lines of 28 integers (7 top points, then 7 bottom
    points running back from right to left)."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        toks = _tokens(line)
        if len(toks) != 2 * CTW_VERTICES:
            raise ParseError(f"expected {2 * CTW_VERTICES} values, got {len(toks)}", lineno)
        try:
            vals = [int(t) for t in toks]
        except ValueError:
            bad = next(t for t in toks if not _is_int(t))
            raise ParseError(f"not an integer: {bad!r}", lineno) from None
        pts = np.array(vals, dtype=np.float64).reshape(CTW_VERTICES, 2)
        half = CTW_VERTICES // 2
        try:
            out.append(TextAnnotation(pts, pts[:half], pts[half:][::-1]))
        except MalformedAnnotationError as exc:
            raise ParseError(str(exc), lineno) from None
    return out


def _is_int(tok):
    try:
        int(tok)
        return True
    except ValueError:
        return False


def parse_polygon_list(text):
    """Parse lines of ``x1,y1,...,xk,yk`` with an optional trailing ``###``
    marking the instance as ignored."""
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        toks = _tokens(line)
        ignore = toks[-1] == "###"
        if ignore:
            toks = toks[:-1]
        try:
            vals = [float(t) for t in toks]
        except ValueError:
            bad = next(t for t in toks if not _is_float(t))
            raise ParseError(f"not a number: {bad!r}", lineno) from None
        if len(vals) % 2:
            raise ParseError(f"odd number of coordinates ({len(vals)})", lineno)
        if len(vals) < 6:
            raise ParseError(f"need at least 3 points, got {len(vals) // 2}", lineno)
        try:
            out.append(TextAnnotation(np.array(vals).reshape(-1, 2), ignore=ignore))
        except MalformedAnnotationError as exc:
            raise ParseError(str(exc), lineno) from None
    return out


def _is_float(tok):
    try:
        float(tok)
        return True
    except ValueError:
        return False


def read_ctw_polygons(path):
    with open(path, encoding="utf-8") as fh:
        return parse_ctw_polygons(fh.read())


def read_polygon_list(path):
    with open(path, encoding="utf-8") as fh:
        return parse_polygon_list(fh.read())


def _num(v):
    v = float(v)
    return int(v) if v.is_integer() else v


def _pts(arr):
    return [[_num(x), _num(y)] for x, y in np.asarray(arr)]


def annotation_to_dict(ann):
    d = {"points": _pts(ann.boundary), "ignore": bool(ann.ignore)}
    if ann.top_line is not None:
        d["top_line"] = _pts(ann.top_line)
        d["bottom_line"] = _pts(ann.bottom_line)
    return d


def annotation_from_dict(d):
    if "top_line" in d:
        return TextAnnotation(np.array(d["points"], dtype=np.float64), d["top_line"],
                              d["bottom_line"], ignore=bool(d.get("ignore", False)))
    return TextAnnotation(np.array(d["points"], dtype=np.float64),
                          ignore=bool(d.get("ignore", False)))


def annotations_to_json(annotations):
    """Canonical JSON used for golden files."""
    return json.dumps([annotation_to_dict(a) for a in annotations], indent=2, sort_keys=True) + "\n"


def format_ctw_polygons(annotations):
    lines = []
    for ann in annotations:
        if ann.top_line is None or len(ann.top_line) != CTW_VERTICES // 2:
            raise ValueError("CTW output needs 7-point top and bottom lines")
        pts = np.concatenate([ann.top_line, ann.bottom_line[::-1]])
        lines.append(",".join(str(int(round(v))) for v in pts.reshape(-1)))
    return "".join(line + "\n" for line in lines)


def format_polygon_list(annotations):
    lines = []
    for ann in annotations:
        vals = [str(_num(v)) for v in ann.boundary.reshape(-1)]
        if ann.ignore:
            vals.append("###")
        lines.append(",".join(vals))
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ManifestEntry:
    image_path: str
    annotations: List[TextAnnotation]

    def load_image(self):
        return np.load(self.image_path)


def read_manifest(path):
    """Read a JSON-lines manifest; relative image paths resolve against it."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                anns = [annotation_from_dict(a) for a in rec.get("annotations", [])]
                image_path = rec["image_path"]
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"bad manifest record: {exc}", lineno) from None
            if not os.path.isabs(image_path):
                image_path = os.path.join(base, image_path)
            entries.append(ManifestEntry(image_path, anns))
    return entries


def write_manifest(path, records):
    """``records`` is an iterable of (image_path, annotations) pairs."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_path, anns in records:
            rec = {"image_path": image_path, "annotations": [annotation_to_dict(a) for a in anns]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_synthetic_set(out_dir, count, seed=0, canvas=(128, 128), **kw):
    """Render ``count`` random samples as .npy images plus ``manifest.jsonl``."""
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for i in range(count):
        sample = random_sample(seed * 100003 + i, canvas, **kw)
        name = f"img_{i:04d}.npy"
        np.save(os.path.join(out_dir, name), sample.image)
        records.append((name, sample.annotations))
    path = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(path, records)
    return path


# ---------------------------------------------------------------------------
# augmentation


def _union_box(annotations):
    pts = np.concatenate([a.boundary for a in annotations])
    return pts.min(axis=0), pts.max(axis=0)


def augment(sample, seed, out_size=128, rotation=None, crop=None):
    """Random square crop holding every instance, resize to ``out_size`` and
    rotate by a multiple of 90 degrees.

    ``crop`` = (x0, y0, side) and ``rotation`` in {0, 90, 180, 270} pin the
    random choices. A 90 degree turn maps (x, y) to (N - 1 - y, x).
    """
    rng = np.random.default_rng(seed)
    _, h, w = sample.image.shape
    limit = min(h, w)
    if crop is None:
        if sample.annotations:
            lo, hi = _union_box(sample.annotations)
            lo = np.floor(lo).astype(int)
            hi = np.ceil(hi).astype(int)
            need = int(max(hi - lo)) + 1
        else:
            need = limit + 1
        if need > limit:
            side = limit
            x0, y0 = (w - side) // 2, (h - side) // 2
        else:
            side = int(rng.integers(need, limit + 1))
            x_lo, x_hi = max(0, hi[0] - side + 1), min(lo[0], w - side)
            y_lo, y_hi = max(0, hi[1] - side + 1), min(lo[1], h - side)
            x0 = int(rng.integers(x_lo, x_hi + 1))
            y0 = int(rng.integers(y_lo, y_hi + 1))
    else:
        x0, y0, side = crop
    if rotation is None:
        rotation = int(rng.integers(0, 4)) * 90
    if rotation not in (0, 90, 180, 270):
        raise ValueError(f"rotation must be a multiple of 90, got {rotation}")
    k = rotation // 90
    f = out_size / side

    grid = (np.arange(out_size) + 0.5) / f - 0.5
    yy, xx = np.meshgrid(y0 + grid, x0 + grid, indexing="ij")
    image = np.stack([ndimage.map_coordinates(ch, [yy, xx], order=1, mode="nearest")
                      for ch in sample.image])
    image = np.stack([np.rot90(ch, -k) for ch in image])

    def transform(pts):
        pts = (np.asarray(pts, dtype=np.float64) - [x0, y0] + 0.5) * f - 0.5
        for _ in range(k):
            pts = np.stack([out_size - 1 - pts[:, 1], pts[:, 0]], axis=1)
        return pts

    return Sample(image=np.ascontiguousarray(image),
                  annotations=[a.transformed(transform) for a in sample.annotations])
