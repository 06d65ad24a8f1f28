"""Polygon and contour primitives.

Coordinates are image pixels with ``y`` increasing downward, so "top" is the
point of minimal ``y``.  Contours are ``(N, 2)`` float arrays of ``(x, y)``
rows; the last vertex implicitly connects back to the first.

The pipeline walks every contour in the order top -> left -> bottom -> right,
which is counter-clockwise as drawn on screen and has a *negative* shoelace
area in these coordinates.  :func:`signed_area` keeps the textbook sign
convention (positive for counter-clockwise in a y-up frame).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import kernels

MERGE_EPS = 1e-9
DEFAULT_IOU_CELLS = 256


class GeometryError(ValueError):
    """Raised for degenerate or malformed geometric input."""


def as_points(c, min_vertices=3):
    """Validate ``c`` as a contour and return it as a float64 ``(N, 2)`` array."""
    if isinstance(c, Contour):
        c = c.points
    pts = np.asarray(c, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise GeometryError(f"expected an (N, 2) array of points, got shape {pts.shape}")
    if pts.shape[0] < min_vertices:
        raise GeometryError(f"contour needs at least {min_vertices} vertices, got {pts.shape[0]}")
    if not np.isfinite(pts).all():
        raise GeometryError("contour has non-finite coordinates")
    return pts


@dataclass(frozen=True)
class Contour:
    """A closed polygon with validated vertices."""

    points: np.ndarray

    def __post_init__(self):
        pts = as_points(self.points)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]

    @property
    def orientation(self) -> str:
        """``"ccw"`` when the contour runs counter-clockwise on screen (y down)."""
        a = signed_area(self.points)
        if a < 0:
            return "ccw"
        if a > 0:
            return "cw"
        return "degenerate"

    def normalized(self) -> Contour:
        return Contour(canonical_orientation(self.points))

    def to_json(self) -> str:
        return json.dumps(contour_to_list(self.points))

    @classmethod
    def from_json(cls, text: str) -> Contour:
        return cls(np.asarray(json.loads(text), dtype=np.float64))


def contour_to_list(points):
    return [[float(x), float(y)] for x, y in np.asarray(points)]


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError("box has non-finite coordinates")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"invalid box {vals}")

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_points(cls, pts) -> Box:
        pts = np.asarray(pts, dtype=np.float64)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        return cls(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


@dataclass(frozen=True)
class ExtremeSet:
    """Top, left, bottom and right points, each an ``(x, y)`` tuple."""

    top: tuple
    left: tuple
    bottom: tuple
    right: tuple

    def as_array(self) -> np.ndarray:
        return np.array([self.top, self.left, self.bottom, self.right], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> ExtremeSet:
        arr = np.asarray(arr, dtype=np.float64).reshape(4, 2)
        return cls(*(tuple(float(v) for v in row) for row in arr))


def signed_area(c) -> float:
    """Shoelace area; positive for counter-clockwise order in a y-up frame."""
    pts = np.asarray(c.points if isinstance(c, Contour) else c, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def canonical_orientation(c) -> np.ndarray:
    """Return the vertices ordered top -> left -> bottom -> right (negative shoelace)."""
    pts = as_points(c)
    if signed_area(pts) > 0:
        pts = pts[::-1].copy()
    return pts


def perimeter(c) -> float:
    pts = as_points(c, min_vertices=1)
    return float(np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1).sum())


def _nearest_boundary_position(pts, start):
    """Arc-length position of the boundary point nearest to ``start``."""
    a = pts
    d = np.roll(pts, -1, axis=0) - a
    ll = (d * d).sum(axis=1)
    seg_len = np.sqrt(ll)
    safe = np.where(ll > 0, ll, 1.0)
    t = np.where(ll > 0, np.clip(((start - a) * d).sum(axis=1) / safe, 0.0, 1.0), 0.0)
    proj = a + t[:, None] * d
    dist = np.linalg.norm(proj - start, axis=1)
    seg = int(np.argmin(dist))
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    return cum[seg] + t[seg] * seg_len[seg]


def uniform_resample(polyline, n, start=None) -> np.ndarray:
    """Place ``n`` points at equal arc-length spacing along a closed polyline.

    The first output point is the boundary point closest to ``start``
    (the first vertex when ``start`` is None); subsequent points follow the
    input vertex order.
    """
    pts = as_points(polyline)
    if n < 3:
        raise GeometryError("n must be >= 3")
    d = np.roll(pts, -1, axis=0) - pts
    seg_len = np.sqrt((d * d).sum(axis=1))
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    if not total > 0:
        raise GeometryError("zero-perimeter contour")
    s0 = 0.0 if start is None else _nearest_boundary_position(pts, np.asarray(start, dtype=np.float64))
    s = np.mod(s0 + total * np.arange(n) / n, total)
    seg = np.searchsorted(cum, s, side="right") - 1
    seg = np.clip(seg, 0, len(seg_len) - 1)
    # side='right' never lands on a zero-length segment
    t = np.where(seg_len[seg] > 0, (s - cum[seg]) / np.where(seg_len[seg] > 0, seg_len[seg], 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    return pts[seg] + t[:, None] * d[seg]


def extreme_points(polygon) -> ExtremeSet:
    """Vertices of minimal y, minimal x, maximal y, maximal x (lowest index on ties)."""
    pts = as_points(polygon)
    return ExtremeSet(
        top=tuple(pts[int(np.argmin(pts[:, 1]))]),
        left=tuple(pts[int(np.argmin(pts[:, 0]))]),
        bottom=tuple(pts[int(np.argmax(pts[:, 1]))]),
        right=tuple(pts[int(np.argmax(pts[:, 0]))]),
    )


def diamond_from_box(box: Box) -> np.ndarray:
    cx = 0.5 * (box.x_min + box.x_max)
    cy = 0.5 * (box.y_min + box.y_max)
    return np.array([[cx, box.y_min], [box.x_min, cy], [cx, box.y_max], [box.x_max, cy]])


def octagon_from_extremes(ex: ExtremeSet) -> np.ndarray:
    """Cut-corner octagon spanned by four extreme points.

    Each extreme point is projected onto its edge of the points' bounding box
    and grown along that edge by a quarter of the edge length each way,
    stopping at the corners.  Consecutive coincident endpoints are merged.
    """
    e = ex.as_array()
    if not np.isfinite(e).all():
        raise GeometryError("non-finite extreme point")
    x_min, y_min = e.min(axis=0)
    x_max, y_max = e.max(axis=0)
    w, h = x_max - x_min, y_max - y_min
    if not (w > 0 and h > 0):
        raise GeometryError("extreme points span a zero-width or zero-height box")
    (tx, _), (_, ly), (bx, _), (_, ry) = e
    tx, bx = min(max(tx, x_min), x_max), min(max(bx, x_min), x_max)
    ly, ry = min(max(ly, y_min), y_max), min(max(ry, y_min), y_max)
    verts = [
        (min(tx + w / 4, x_max), y_min), (max(tx - w / 4, x_min), y_min),
        (x_min, max(ly - h / 4, y_min)), (x_min, min(ly + h / 4, y_max)),
        (max(bx - w / 4, x_min), y_max), (min(bx + w / 4, x_max), y_max),
        (x_max, min(ry + h / 4, y_max)), (x_max, max(ry - h / 4, y_min)),
    ]
    out = []
    for v in verts:
        if not out or math.dist(out[-1], v) > MERGE_EPS:
            out.append(v)
    while len(out) > 1 and math.dist(out[0], out[-1]) <= MERGE_EPS:
        out.pop()
    return np.array(out, dtype=np.float64)


def _iou_grid(a, b, resolution):
    both = np.vstack([a, b])
    lo, hi = both.min(axis=0), both.max(axis=0)
    ext = hi - lo
    if resolution is None:
        span = float(max(ext.max(), 1e-12))
        step = span / DEFAULT_IOU_CELLS
    else:
        if not resolution > 0:
            raise GeometryError("resolution must be positive")
        step = 1.0 / float(resolution)
    nx = max(1, int(math.ceil(ext[0] / step - 1e-9)))
    ny = max(1, int(math.ceil(ext[1] / step - 1e-9)))
    return float(lo[0]), float(lo[1]), step, nx, ny


def polygon_iou(a, b, resolution=None) -> float:
    """Raster IoU of two polygons with even-odd fill on a shared grid.

    ``resolution`` is grid cells per unit length; by default the longer side
    of the joint bounding box gets 256 cells.
    """
    pa, pb = as_points(a), as_points(b)
    x0, y0, step, nx, ny = _iou_grid(pa, pb, resolution)
    ma = kernels.rasterize(np.ascontiguousarray(pa), x0, y0, step, nx, ny).astype(bool)
    mb = kernels.rasterize(np.ascontiguousarray(pb), x0, y0, step, nx, ny).astype(bool)
    union = np.count_nonzero(ma | mb)
    if union == 0:
        return 0.0
    return np.count_nonzero(ma & mb) / union


def chamfer_distance(a, b) -> float:
    """Symmetric mean of nearest-vertex distances between two point sets."""
    pa = as_points(a, min_vertices=1)
    pb = as_points(b, min_vertices=1)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2))
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


def gt_contour(polygon, ex_top, n) -> np.ndarray:
    """Training target: ``n`` arc-length-uniform vertices starting nearest ``ex_top``."""
    return uniform_resample(canonical_orientation(polygon), n, start=ex_top)
