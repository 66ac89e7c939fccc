"""Polygon helpers. Polygons are ``(N, 2)`` float arrays of ``(x, y)``
vertices in image coordinates (y grows downward), implicitly closed.

Pixel ``(row i, col j)`` has its center at ``(x=j, y=i)``.
"""

import numpy as np

from .errors import MalformedAnnotationError


def as_polygon(points, min_vertices=3):
    """Validate and normalise a vertex list.

    Consecutive duplicate vertices (including last == first) are dropped.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise MalformedAnnotationError("empty polygon")
    keep = [0]
    for i in range(1, len(pts)):
        if not np.array_equal(pts[i], pts[keep[-1]]):
            keep.append(i)
    if len(keep) > 1 and np.array_equal(pts[keep[-1]], pts[keep[0]]):
        keep.pop()
    pts = pts[keep]
    if len(pts) < min_vertices:
        raise MalformedAnnotationError(
            f"polygon needs at least {min_vertices} distinct vertices, got {len(pts)}")
    return pts


def signed_area(pts):
    """Shoelace area; positive for clockwise order on screen (y down)."""
    pts = np.asarray(pts, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def area(pts):
    return abs(signed_area(pts))


def polyline_length(pts):
    pts = np.asarray(pts, dtype=np.float64)
    if len(pts) < 2:
        return 0.0
    return float(np.hypot(*np.diff(pts, axis=0).T).sum())


def _segments_cross(p1, p2, q1, q2):
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    def on_seg(a, b, c):
        return (min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12
                and min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12)

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p1, p2, q1):
        return True
    if o2 == 0 and on_seg(p1, p2, q2):
        return True
    if o3 == 0 and on_seg(q1, q2, p1):
        return True
    if o4 == 0 and on_seg(q1, q2, p2):
        return True
    return False


def is_simple(pts):
    """True if no two non-adjacent edges touch."""
    pts = np.asarray(pts, dtype=np.float64)
    n = len(pts)
    if n < 3:
        return False
    for i in range(n):
        a1, a2 = pts[i], pts[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_cross(a1, a2, pts[j], pts[(j + 1) % n]):
                return False
    return True


def contains_points(pts, xs, ys):
    """Even-odd point-in-polygon test for arrays of query coordinates."""
    pts = np.asarray(pts, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = np.zeros(np.broadcast(xs, ys).shape, dtype=bool)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        if ay == by:
            continue
        straddle = (ay > ys) != (by > ys)
        xcross = ax + (ys - ay) * (bx - ax) / (by - ay)
        inside ^= straddle & (xs < xcross)
    return inside


def rasterize(pts, shape):
    """Boolean H x W mask of pixel centers inside the polygon."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    pts = np.asarray(pts, dtype=np.float64)
    if len(pts) < 3:
        return mask
    c0 = max(int(np.floor(pts[:, 0].min())), 0)
    c1 = min(int(np.ceil(pts[:, 0].max())), w - 1)
    r0 = max(int(np.floor(pts[:, 1].min())), 0)
    r1 = min(int(np.ceil(pts[:, 1].max())), h - 1)
    if c0 > c1 or r0 > r1:
        return mask
    ys, xs = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    mask[r0:r1 + 1, c0:c1 + 1] = contains_points(pts, xs, ys)
    return mask
