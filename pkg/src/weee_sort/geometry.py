"""Annotation parsing and crop-window geometry.

Each annotated component goes polygon -> minimum-area oriented box ->
circumscribed axis-aligned square -> square fitted to the image bounds.
All functions here are pure.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from shapely.geometry import LinearRing

from .errors import AnnotationError, GeometryError

logger = logging.getLogger(__name__)

CLASSES = ("metal_piece", "battery", "pcb", "glass")
FACES = ("A", "B")
BACKGROUNDS = ("gray", "black", "white")

# double-precision slack at <= 3072 px scale
CONTAINMENT_TOL = 1e-6
_ANGLE_SNAP = 1e-9


@dataclass(frozen=True)
class Polygon:
    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        object.__setattr__(self, "vertices", verts)
        if len(verts) < 3:
            raise GeometryError(f"polygon needs >= 3 vertices, got {len(verts)}")
        if not all(math.isfinite(c) for v in verts for c in v):
            raise GeometryError("polygon has non-finite coordinates")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float)

    @property
    def area(self) -> float:
        """Unsigned shoelace area."""
        pts = self.as_array()
        x, y = pts[:, 0], pts[:, 1]
        return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))

    def is_simple(self) -> bool:
        return bool(LinearRing(self.vertices).is_simple)


@dataclass(frozen=True)
class OrientedBox:
    """Rotated rectangle; ``angle`` (degrees, [0, 90)) is the direction of the width axis."""

    center: tuple[float, float]
    width: float
    height: float
    angle: float

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise GeometryError(f"box sides must be positive, got {self.width}x{self.height}")

    @classmethod
    def canonical(cls, center, width, height, angle) -> "OrientedBox":
        """Build a box with the angle folded into [0, 90), swapping sides as needed."""
        a = math.fmod(angle, 180.0)
        if a < 0:
            a += 180.0
        if a >= 90.0:
            a -= 90.0
            width, height = height, width
        if a >= 90.0 - _ANGLE_SNAP:
            a = 0.0
            width, height = height, width
        elif a < _ANGLE_SNAP:
            a = 0.0
        return cls((float(center[0]), float(center[1])), float(width), float(height), a)

    @property
    def area(self) -> float:
        return self.width * self.height

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        t = math.radians(self.angle)
        u = np.array([math.cos(t), math.sin(t)])
        return u, np.array([-u[1], u[0]])

    def corners(self) -> np.ndarray:
        u, n = self.axes()
        c = np.asarray(self.center)
        hw, hh = self.width / 2, self.height / 2
        return np.array([c - hw * u - hh * n, c + hw * u - hh * n,
                         c + hw * u + hh * n, c - hw * u + hh * n])

    def contains(self, points, tol: float = CONTAINMENT_TOL) -> bool:
        u, n = self.axes()
        d = np.atleast_2d(np.asarray(points, dtype=float)) - np.asarray(self.center)
        return bool(np.all(np.abs(d @ u) <= self.width / 2 + tol)
                    and np.all(np.abs(d @ n) <= self.height / 2 + tol))


@dataclass(frozen=True)
class AxisAlignedSquare:
    min_x: float
    min_y: float
    side: float

    def __post_init__(self):
        if not self.side > 0:
            raise GeometryError(f"square side must be positive, got {self.side}")

    @property
    def max_x(self) -> float:
        return self.min_x + self.side

    @property
    def max_y(self) -> float:
        return self.min_y + self.side

    def contains(self, points, tol: float = CONTAINMENT_TOL) -> bool:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return bool(np.all(p[:, 0] >= self.min_x - tol) and np.all(p[:, 0] <= self.max_x + tol)
                    and np.all(p[:, 1] >= self.min_y - tol) and np.all(p[:, 1] <= self.max_y + tol))


@dataclass(frozen=True)
class PaddingSpec:
    """Pixels of edge replication needed on each side to restore a square crop."""

    top: float = 0
    bottom: float = 0
    left: float = 0
    right: float = 0

    @property
    def empty(self) -> bool:
        return not (self.top or self.bottom or self.left or self.right)


@dataclass(frozen=True)
class Annotation:
    polygon: Polygon
    class_label: str
    annotation_index: int


@dataclass(frozen=True)
class AnnotatedImageRecord:
    image_id: str
    image_path: str
    width: int
    height: int
    face: str
    background: str
    annotations: tuple[Annotation, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise AnnotationError(f"{self.image_id}: image dims must be positive")


# -- parsing -----------------------------------------------------------------

def _require(entry: dict, key: str, types, where: str):
    if key not in entry:
        raise AnnotationError(f"{where}: missing field {key!r}")
    value = entry[key]
    if not isinstance(value, types) or isinstance(value, bool):
        raise AnnotationError(f"{where}: field {key!r} has wrong type {type(value).__name__}")
    return value


def _clamp_polygon(raw, width, height, where) -> tuple[list[tuple[float, float]], int]:
    if not isinstance(raw, list):
        raise AnnotationError(f"{where}: polygon must be a list of [x, y] pairs")
    if len(raw) < 3:
        raise AnnotationError(f"{where}: polygon has {len(raw)} vertices, need at least 3")
    out, clamped = [], 0
    for v in raw:
        if (not isinstance(v, (list, tuple)) or len(v) != 2
                or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in v)):
            raise AnnotationError(f"{where}: bad vertex {v!r}")
        x, y = float(v[0]), float(v[1])
        if not (math.isfinite(x) and math.isfinite(y)):
            raise AnnotationError(f"{where}: non-finite vertex {v!r}")
        cx, cy = min(max(x, 0.0), width), min(max(y, 0.0), height)
        clamped += (cx, cy) != (x, y)
        out.append((cx, cy))
    return out, clamped


def parse_annotation_data(data, classes: Sequence[str] = CLASSES
                          ) -> tuple[list[AnnotatedImageRecord], int]:
    """Validate already-decoded annotation JSON. See :func:`parse_annotation_file`."""
    if not isinstance(data, dict) or not isinstance(data.get("images"), list):
        raise AnnotationError("top level must be an object with an 'images' list")
    records, seen, total_clamped = [], set(), 0
    for i, entry in enumerate(data["images"]):
        if not isinstance(entry, dict):
            raise AnnotationError(f"images[{i}]: expected an object")
        image_id = _require(entry, "image_id", str, f"images[{i}]")
        where = f"image {image_id!r}"
        if image_id in seen:
            raise AnnotationError(f"duplicate image_id {image_id!r}")
        seen.add(image_id)
        width = _require(entry, "width", int, where)
        height = _require(entry, "height", int, where)
        if width <= 0 or height <= 0:
            raise AnnotationError(f"{where}: width/height must be positive")
        face = _require(entry, "face", str, where)
        if face not in FACES:
            raise AnnotationError(f"{where}: unknown face {face!r}")
        background = _require(entry, "background", str, where)
        if background not in BACKGROUNDS:
            raise AnnotationError(f"{where}: unknown background {background!r}")
        anns = []
        for k, a in enumerate(_require(entry, "annotations", list, where)):
            awhere = f"{where} annotation {k}"
            if not isinstance(a, dict):
                raise AnnotationError(f"{awhere}: expected an object")
            label = _require(a, "class", str, awhere)
            if label not in classes:
                raise AnnotationError(f"{awhere}: unknown class label {label!r}")
            verts, n = _clamp_polygon(a.get("polygon"), width, height, awhere)
            total_clamped += n
            try:
                poly = Polygon(tuple(verts))
            except GeometryError as exc:
                raise AnnotationError(f"{awhere}: {exc}") from None
            if poly.area <= 0:
                raise AnnotationError(f"{awhere}: polygon has zero area")
            if not poly.is_simple():
                raise AnnotationError(f"{awhere}: polygon is self-intersecting")
            anns.append(Annotation(poly, label, k))
        records.append(AnnotatedImageRecord(
            image_id, _require(entry, "image_path", str, where),
            width, height, face, background, tuple(anns)))
    if total_clamped:
        logger.warning("clamped %d vertices into image bounds", total_clamped)
    return records, total_clamped


def parse_annotation_file(path, classes: Sequence[str] = CLASSES
                          ) -> tuple[list[AnnotatedImageRecord], int]:
    """Read an annotation JSON file.

    Returns the records and the number of vertices that had to be clamped
    into their image bounds. Relative ``image_path`` values are resolved
    against the annotation file's directory.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno - 1 < len(text.splitlines()) else ""
        raise AnnotationError(
            f"{path}: invalid JSON at line {exc.lineno} col {exc.colno}: {exc.msg}\n  {line}"
        ) from None
    records, clamped = parse_annotation_data(data, classes)
    resolved = []
    for r in records:
        p = Path(r.image_path)
        if not p.is_absolute():
            p = path.parent / p
        resolved.append(AnnotatedImageRecord(r.image_id, str(p), r.width, r.height,
                                             r.face, r.background, r.annotations))
    return resolved, clamped


# -- oriented boxes ----------------------------------------------------------

def convex_hull(points) -> np.ndarray:
    """Counter-clockwise hull (Andrew's monotone chain), collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float))))
    if len(pts) < 3:
        return np.asarray(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1])


def min_area_obb(polygon: Polygon) -> OrientedBox:
    """Minimum-area enclosing rectangle via rotating calipers.

    The optimal rectangle has one side collinear with a hull edge, so we walk
    the hull edges once while advancing three support pointers (far end along
    the edge, near end along the edge, farthest from the edge).
    """
    pts = polygon.as_array()
    scale = max(1.0, float(np.ptp(pts, axis=0).max()))
    if polygon.area <= 1e-12 * scale * scale:
        raise GeometryError("degenerate polygon (zero area)")
    hull = convex_hull(pts)
    h = len(hull)
    if h < 3:
        raise GeometryError("degenerate polygon (collinear vertices)")

    edges = np.roll(hull, -1, axis=0) - hull
    units = edges / np.linalg.norm(edges, axis=1)[:, None]

    def dot(idx, v):
        return float(hull[idx % h] @ v)

    u0 = units[0]
    n0 = np.array([-u0[1], u0[0]])
    proj_u = hull @ u0
    j = int(np.argmax(proj_u))
    m = int(np.argmin(proj_u))
    k = int(np.argmax(hull @ n0))

    best = None
    for i in range(h):
        u = units[i]
        n = np.array([-u[1], u[0]])
        # each pointer moves monotonically around the hull
        for _ in range(h):
            if dot(j + 1, u) > dot(j, u) + 1e-12:
                j += 1
            else:
                break
        for _ in range(h):
            if dot(k + 1, n) > dot(k, n) + 1e-12:
                k += 1
            else:
                break
        for _ in range(h):
            if dot(m + 1, u) < dot(m, u) - 1e-12:
                m += 1
            else:
                break
        base = float(hull[i] @ n)
        umin, umax = dot(m, u), dot(j, u)
        nmax = dot(k, n)
        area = (umax - umin) * (nmax - base)
        if best is None or area < best[0] - 1e-12 * abs(best[0]):
            best = (area, u, n, umin, umax, base, nmax)

    _, u, n, umin, umax, nmin, nmax = best
    center = u * (umin + umax) / 2 + n * (nmin + nmax) / 2
    angle = math.degrees(math.atan2(u[1], u[0]))
    return OrientedBox.canonical(center, umax - umin, nmax - nmin, angle)


def circumscribe_square(obb: OrientedBox) -> AxisAlignedSquare:
    """Smallest axis-aligned square holding all four box corners, sharing their bbox center."""
    c = obb.corners()
    lo, hi = c.min(axis=0), c.max(axis=0)
    side = float(max(hi - lo))
    cx, cy = (lo + hi) / 2
    return AxisAlignedSquare(float(cx - side / 2), float(cy - side / 2), side)


def _fit_axis(lo: float, side: float, extent: float) -> tuple[float, float, float]:
    """Return (new_lo, pad_before, pad_after) along one axis."""
    if side <= extent:
        return min(max(lo, 0.0), extent - side), 0.0, 0.0
    # square must overhang; shift as little as possible so the image span is covered
    lo = min(max(lo, extent - side), 0.0)
    return lo, -lo, lo + side - extent


def fit_square_to_image(square: AxisAlignedSquare, width, height
                        ) -> tuple[AxisAlignedSquare, PaddingSpec]:
    """Move a crop square inside the image, or describe the padding it needs.

    On each axis where the square fits it is translated minimally into the
    image. Where it is longer than the image it is shifted just enough to
    cover the whole image span; the overhang on each edge becomes padding
    (filled by edge replication at crop time). Clipping the returned square
    to the image and adding the padding gives back a ``side x side`` crop.
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"image dims must be positive, got {width}x{height}")
    x, left, right = _fit_axis(square.min_x, square.side, float(width))
    y, top, bottom = _fit_axis(square.min_y, square.side, float(height))
    return AxisAlignedSquare(x, y, square.side), PaddingSpec(top, bottom, left, right)
