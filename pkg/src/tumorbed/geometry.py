"""Convex hulls and tumor-bed extent (d1, d2, d_prim).

The bed is summarised by its convex hull. ``d1`` is the hull diameter,
``d2`` the longest chord perpendicular to ``d1`` and ``d_prim`` their
geometric mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class GeometryError(ValueError):
    pass


class DegenerateHullError(GeometryError):
    pass


class ExtentUndefinedError(GeometryError):
    pass


class Point2(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class Segment:
    a: Point2
    b: Point2

    @property
    def length(self) -> float:
        # sqrt of the squared distance, the same quantity the diameter search compares
        dx = self.b.x - self.a.x
        dy = self.b.y - self.a.y
        return math.sqrt(dx * dx + dy * dy)

    def reversed(self) -> "Segment":
        return Segment(self.b, self.a)


@dataclass(frozen=True, eq=False)
class Polygon:
    """Vertex ring, counter-clockwise, without a repeated closing vertex."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(v)):
            raise GeometryError("non-finite vertex coordinates")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    def __len__(self) -> int:
        return self.vertices.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Polygon):
            return NotImplemented
        return self.vertices.shape == other.vertices.shape and bool(np.all(self.vertices == other.vertices))

    @property
    def area(self) -> float:
        """Signed shoelace area (positive for counter-clockwise rings)."""
        if len(self) < 3:
            return 0.0
        x, y = self.vertices[:, 0], self.vertices[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))

    @property
    def is_degenerate(self) -> bool:
        return len(self) < 3 or self.area == 0.0

    def points(self) -> list[Point2]:
        return [Point2(float(x), float(y)) for x, y in self.vertices]


@dataclass(frozen=True)
class RotatedHull:
    """Hull expressed in a frame where the diagonal runs along +x from the origin."""

    polygon: Polygon
    theta: float
    pivot: Point2

    def to_original(self, x: float, y: float) -> Point2:
        c, s = math.cos(-self.theta), math.sin(-self.theta)
        return Point2(self.pivot.x + c * x - s * y, self.pivot.y + s * x + c * y)


@dataclass(frozen=True)
class TumorBedExtent:
    d1_px: float
    d2_px: float
    d1_mm: float
    d2_mm: float
    d_prim_mm: float
    d1_segment: Segment
    d2_segment: Segment
    theta: float
    mpp: float = field(default=1.0)

    @property
    def d_prim_px(self) -> float:
        return math.sqrt(self.d1_px * self.d2_px)

    def to_dict(self) -> dict:
        seg = lambda s: [[s.a.x, s.a.y], [s.b.x, s.b.y]]  # noqa: E731
        return {
            "d1_px": self.d1_px,
            "d2_px": self.d2_px,
            "d_prim_px": self.d_prim_px,
            "d1_mm": self.d1_mm,
            "d2_mm": self.d2_mm,
            "d_prim_mm": self.d_prim_mm,
            "d1_segment": seg(self.d1_segment),
            "d2_segment": seg(self.d2_segment),
            "theta": self.theta,
            "mpp": self.mpp,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TumorBedExtent":
        seg = lambda v: Segment(Point2(*map(float, v[0])), Point2(*map(float, v[1])))  # noqa: E731
        return cls(
            d1_px=float(doc["d1_px"]),
            d2_px=float(doc["d2_px"]),
            d1_mm=float(doc["d1_mm"]),
            d2_mm=float(doc["d2_mm"]),
            d_prim_mm=float(doc["d_prim_mm"]),
            d1_segment=seg(doc["d1_segment"]),
            d2_segment=seg(doc["d2_segment"]),
            theta=float(doc["theta"]),
            mpp=float(doc.get("mpp", 1.0)),
        )


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        raise GeometryError("no points")
    arr = arr.reshape(-1, 2)
    if not np.all(np.isfinite(arr)):
        raise GeometryError("non-finite point coordinates")
    return arr


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> Polygon:
    """Monotone-chain convex hull.

    Returns a counter-clockwise ring with collinear boundary points dropped.
    One point, two points or a collinear set give a degenerate polygon
    (``is_degenerate`` is true) holding the distinct extreme points.
    """
    arr = _as_points(points)
    pts = sorted(set(map(tuple, arr.tolist())))
    if len(pts) <= 2:
        return Polygon(np.array(pts))

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    ring = lower[:-1] + upper[:-1]
    if len(ring) == 2 and ring[0] == ring[1]:
        ring = ring[:1]
    return Polygon(np.array(ring))


def _require_proper(hull: Polygon) -> np.ndarray:
    if hull.is_degenerate:
        raise DegenerateHullError("degenerate hull")
    return hull.vertices


def _sqdist(v: np.ndarray, i: int, j: int) -> float:
    dx = v[i, 0] - v[j, 0]
    dy = v[i, 1] - v[j, 1]
    return dx * dx + dy * dy


def antipodal_pairs(hull: Polygon) -> list[tuple[int, int]]:
    """Antipodal vertex pairs of a convex CCW polygon (rotating calipers).

    The result is a small superset: each caliper stop also contributes the
    neighbours of the opposite vertex.
    """
    v = _require_proper(hull)
    n = len(v)

    def area2(i, j, k):
        return abs(_cross(v[i % n], v[j % n], v[k % n]))

    pairs = set()
    j = 1
    for i in range(n):
        i1 = (i + 1) % n
        # advance j while it moves farther from edge (i, i+1)
        while area2(i, i1, j + 1) > area2(i, i1, j):
            j += 1
        for a in (i, i1):
            # neighbours of j cover parallel opposite edges and rounding in area2
            for b in (j - 1, j, j + 1):
                pairs.add((a, b % n))
    return sorted((min(a, b), max(a, b)) for a, b in pairs if a != b)


def polygon_diameter(hull: Polygon) -> Segment:
    """Farthest vertex pair of a convex polygon.

    Candidates come from :func:`antipodal_pairs`; equal lengths resolve to
    the lexicographically smallest ``(i, j)`` index pair.
    """
    v = _require_proper(hull)
    best = -1.0
    best_pair = (0, 0)
    for i, j in antipodal_pairs(hull):
        d = _sqdist(v, i, j)
        if d > best:
            best = d
            best_pair = (i, j)
    i, j = best_pair
    return Segment(Point2(float(v[i, 0]), float(v[i, 1])), Point2(float(v[j, 0]), float(v[j, 1])))


def rotate_about_diagonal(hull: Polygon, diag: Segment) -> RotatedHull:
    """Rotate ``hull`` about ``diag.a`` so that ``diag`` lies along +x.

    ``theta = -atan2(dy, dx)`` of the diagonal direction.
    """
    theta = -math.atan2(diag.b.y - diag.a.y, diag.b.x - diag.a.x)
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    shifted = hull.vertices - np.array([diag.a.x, diag.a.y])
    rotated = shifted @ rot.T
    return RotatedHull(Polygon(rotated), theta, Point2(diag.a.x, diag.a.y))


def _vertical_extent(v: np.ndarray, x: float) -> tuple[float, float]:
    """Lowest and highest boundary y on the vertical line at ``x``."""
    lo = math.inf
    hi = -math.inf
    n = len(v)
    for i in range(n):
        xa, ya = v[i]
        xb, yb = v[(i + 1) % n]
        if xa == xb:
            if xa == x:
                lo = min(lo, ya, yb)
                hi = max(hi, ya, yb)
            continue
        if min(xa, xb) <= x <= max(xa, xb):
            y = ya + (x - xa) * (yb - ya) / (xb - xa)
            lo = min(lo, y)
            hi = max(hi, y)
    return lo, hi


def longest_perpendicular_chord(rotated: RotatedHull, diag_length: float) -> Segment:
    """Longest chord perpendicular to the diagonal, in original coordinates.

    Chords are erected at every vertex abscissa of the rotated hull. The
    vertical extent of a convex polygon is concave and piecewise linear in
    ``x`` with breaks at vertices, so the vertex sweep is exact. Diagonal
    end-points give zero-length chords; ties keep the first vertex.
    """
    v = rotated.polygon.vertices
    if rotated.polygon.is_degenerate or diag_length <= 0:
        raise DegenerateHullError("degenerate hull")
    best = 0.0
    best_chord = None
    for x in v[:, 0]:
        x = min(max(float(x), 0.0), diag_length)
        lo, hi = _vertical_extent(v, x)
        if hi - lo > best:
            best = hi - lo
            best_chord = (x, lo, hi)
    if best_chord is None:
        raise DegenerateHullError("degenerate hull")
    x, lo, hi = best_chord
    return Segment(rotated.to_original(x, lo), rotated.to_original(x, hi))


def _orient_upward(seg: Segment) -> Segment:
    # the second end-point is taken to lie above the first
    if seg.b.y < seg.a.y or (seg.b.y == seg.a.y and seg.b.x < seg.a.x):
        return seg.reversed()
    return seg


def px_to_mm(length_px: float, mpp: float) -> float:
    return length_px * mpp * 1e-3


def tumor_bed_extent(points, mpp: float) -> TumorBedExtent:
    """Compute d1, d2 and d_prim for the convex hull of ``points``.

    Parameters
    ----------
    points : array-like, shape (n, 2)
        Level-0 pixel coordinates of everything considered tumor.
    mpp : float
        Microns per pixel.

    Raises
    ------
    ExtentUndefinedError
        When the points do not span a 2-D hull.
    """
    if not mpp > 0:
        raise GeometryError(f"mpp must be positive, got {mpp}")
    try:
        hull = convex_hull(points)
        diag = _orient_upward(polygon_diameter(hull))
        rotated = rotate_about_diagonal(hull, diag)
        d1 = diag.length
        chord = longest_perpendicular_chord(rotated, d1)
    except (DegenerateHullError, GeometryError) as exc:
        raise ExtentUndefinedError(f"extent undefined: {exc}") from exc
    d2 = chord.length
    d1_mm = px_to_mm(d1, mpp)
    d2_mm = px_to_mm(d2, mpp)
    return TumorBedExtent(
        d1_px=d1,
        d2_px=d2,
        d1_mm=d1_mm,
        d2_mm=d2_mm,
        d_prim_mm=math.sqrt(d1_mm * d2_mm),
        d1_segment=diag,
        d2_segment=chord,
        theta=rotated.theta,
        mpp=mpp,
    )


# ---------------------------------------------------------------------------
# Polygon documents
# ---------------------------------------------------------------------------


def polygon_to_doc(slide_id: str, mpp: float, polygon: Polygon | None, **extra) -> dict:
    doc = {
        "slide_id": slide_id,
        "mpp": mpp,
        "vertices": [] if polygon is None else polygon.vertices.tolist(),
    }
    doc.update(extra)
    return doc


def polygon_from_doc(doc: dict) -> tuple[str, float, Polygon | None]:
    try:
        slide_id = str(doc["slide_id"])
        mpp = float(doc["mpp"])
        verts = doc["vertices"]
    except (KeyError, TypeError, ValueError) as exc:
        raise GeometryError(f"malformed polygon document: {exc}") from exc
    poly = Polygon(np.asarray(verts, dtype=np.float64).reshape(-1, 2)) if verts else None
    return slide_id, mpp, poly


def write_polygon(path, slide_id: str, mpp: float, polygon: Polygon | None, **extra) -> None:
    Path(path).write_text(json.dumps(polygon_to_doc(slide_id, mpp, polygon, **extra), indent=2) + "\n")


def read_polygon(path) -> tuple[str, float, Polygon | None]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise GeometryError(f"{path}: not a polygon document ({exc})") from exc
    return polygon_from_doc(doc)


def regular_polygon(n: int, radius: float = 1.0, center: Sequence[float] = (0.0, 0.0), phase: float = 0.0) -> Polygon:
    t = phase + 2 * np.pi * np.arange(n) / n
    return Polygon(np.column_stack([center[0] + radius * np.cos(t), center[1] + radius * np.sin(t)]))


def ellipse_polygon(n: int, a: float, b: float, center: Sequence[float] = (0.0, 0.0), angle: float = 0.0) -> Polygon:
    t = 2 * np.pi * np.arange(n) / n
    x, y = a * np.cos(t), b * np.sin(t)
    c, s = math.cos(angle), math.sin(angle)
    return Polygon(np.column_stack([center[0] + c * x - s * y, center[1] + s * x + c * y]))


def hull_contains(hull: Polygon, points: Iterable, tol: float = 1e-9) -> np.ndarray:
    """Inclusive containment test for a CCW convex ring."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    v = hull.vertices
    if len(v) < 3:
        raise DegenerateHullError("degenerate hull")
    e = np.roll(v, -1, axis=0) - v
    rel = p[:, None, :] - v[None, :, :]
    cross = e[None, :, 0] * rel[..., 1] - e[None, :, 1] * rel[..., 0]
    span = np.ptp(v, axis=0).max()
    return np.all(cross >= -tol * max(span, 1.0) ** 2, axis=1)
