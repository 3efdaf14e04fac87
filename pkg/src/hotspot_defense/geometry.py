"""Integer-nanometer rectilinear geometry for layout clips.

All coordinates are integers in nanometers. Polygons are stored as open
vertex loops in counter-clockwise order; the closing vertex is implicit.
Images produced by :func:`rasterize` are indexed ``[row, col]`` with row 0
at ``y = 0`` (no vertical flip).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, NamedTuple, Sequence

import numpy as np

CLIP_SIZE_NM = 1110
ROI_SIZE_NM = 195
MANUFACTURING_GRID_NM = 5


class GeometryError(ValueError):
    """Base class for geometry failures."""


class InvalidPolygonError(GeometryError):
    """Vertex loop violates the rectilinear polygon invariants."""


class OverlapError(GeometryError):
    """Two polygons share interior area."""


class RejectedMoveError(GeometryError):
    """An edge move produced an invalid or out-of-bounds polygon."""


class RasterConfigError(GeometryError):
    """Raster pitch does not tile the clip."""


class Point(NamedTuple):
    x: int
    y: int


@dataclass(frozen=True, order=True)
class Rect:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise GeometryError(f"degenerate rect {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def intersection(self, other: Rect) -> Rect | None:
        x0, y0 = max(self.x0, other.x0), max(self.y0, other.y0)
        x1, y1 = min(self.x1, other.x1), min(self.y1, other.y1)
        if x0 < x1 and y0 < y1:
            return Rect(x0, y0, x1, y1)
        return None

    def intersects(self, other: Rect) -> bool:
        """True when the interiors overlap (shared boundary does not count)."""
        return self.intersection(other) is not None

    def contains_rect(self, other: Rect) -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and other.x1 <= self.x1 and other.y1 <= self.y1)

    def expanded(self, margin: int) -> Rect:
        return Rect(self.x0 - margin, self.y0 - margin, self.x1 + margin, self.y1 + margin)

    def translated(self, dx: int, dy: int) -> Rect:
        return Rect(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)


def centered_roi(clip_size: int = CLIP_SIZE_NM, roi_size: int = ROI_SIZE_NM) -> Rect:
    """Centered ROI: floor of the low corner, that corner plus ``roi_size``.

    For 1110/195 the exact box is (457.5, 457.5)-(652.5, 652.5); this yields
    (457, 457)-(652, 652).
    """
    lo = (clip_size - roi_size) // 2
    return Rect(lo, lo, lo + roi_size, lo + roi_size)


DEFAULT_ROI = centered_roi()
CLIP_BOUNDS = Rect(0, 0, CLIP_SIZE_NM, CLIP_SIZE_NM)


def _signed_area2(pts: Sequence[Point]) -> int:
    s = 0
    n = len(pts)
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        s += x0 * y1 - x1 * y0
    return s


def _segments_touch(a0: Point, a1: Point, b0: Point, b1: Point) -> bool:
    """Closed axis-aligned segment intersection test."""
    ax0, ax1 = sorted((a0.x, a1.x))
    ay0, ay1 = sorted((a0.y, a1.y))
    bx0, bx1 = sorted((b0.x, b1.x))
    by0, by1 = sorted((b0.y, b1.y))
    return ax0 <= bx1 and bx0 <= ax1 and ay0 <= by1 and by0 <= ay1


@dataclass(frozen=True)
class RectilinearPolygon:
    """Simple rectilinear polygon, counter-clockwise, closing edge implicit."""

    vertices: tuple[Point, ...]

    def __post_init__(self) -> None:
        pts = tuple(Point(int(x), int(y)) for x, y in self.vertices)
        object.__setattr__(self, "vertices", pts)
        n = len(pts)
        if n < 4:
            raise InvalidPolygonError(f"need at least 4 vertices, got {n}")
        if n % 2:
            raise InvalidPolygonError(f"rectilinear loop needs an even vertex count, got {n}")
        first_horizontal = pts[0].y == pts[1].y
        for i in range(n):
            p, q = pts[i], pts[(i + 1) % n]
            horizontal = (i % 2 == 0) == first_horizontal
            if horizontal:
                ok = p.y == q.y and p.x != q.x
            else:
                ok = p.x == q.x and p.y != q.y
            if not ok:
                raise InvalidPolygonError(
                    f"edge {i} {p}->{q} breaks horizontal/vertical alternation")
        for i in range(n):
            a0, a1 = pts[i], pts[(i + 1) % n]
            for j in range(i + 2, n):
                if i == 0 and j == n - 1:
                    continue
                if _segments_touch(a0, a1, pts[j], pts[(j + 1) % n]):
                    raise InvalidPolygonError(f"edges {i} and {j} intersect")
        area2 = _signed_area2(pts)
        if area2 <= 0:
            raise InvalidPolygonError("vertices must be counter-clockwise with positive area")

    @classmethod
    def from_points(cls, points: Iterable[Sequence[int]]) -> RectilinearPolygon:
        """Build from any loop: drops a repeated closing vertex, fixes orientation."""
        pts = [Point(int(p[0]), int(p[1])) for p in points]
        if len(pts) > 1 and pts[0] == pts[-1]:
            pts = pts[:-1]
        if len(pts) >= 3 and _signed_area2(pts) < 0:
            pts = [pts[0]] + pts[:0:-1]
        return cls(tuple(pts))

    @classmethod
    def from_rect(cls, x0: int, y0: int, x1: int, y1: int) -> RectilinearPolygon:
        return cls((Point(x0, y0), Point(x1, y0), Point(x1, y1), Point(x0, y1)))

    def __len__(self) -> int:
        return len(self.vertices)

    def edge(self, index: int) -> tuple[Point, Point]:
        n = len(self.vertices)
        return self.vertices[index % n], self.vertices[(index + 1) % n]

    @property
    def edge_count(self) -> int:
        return len(self.vertices)

    @cached_property
    def bbox(self) -> Rect:
        xs = [p.x for p in self.vertices]
        ys = [p.y for p in self.vertices]
        return Rect(min(xs), min(ys), max(xs), max(ys))

    @cached_property
    def rects(self) -> tuple[Rect, ...]:
        return decompose(self)

    def translated(self, dx: int, dy: int) -> RectilinearPolygon:
        return RectilinearPolygon(tuple(Point(p.x + dx, p.y + dy) for p in self.vertices))

    def closed_loop(self) -> list[Point]:
        return list(self.vertices) + [self.vertices[0]]


def polygon_area(poly: RectilinearPolygon) -> int:
    """Exact shoelace area in nm^2."""
    if not isinstance(poly, RectilinearPolygon):
        poly = RectilinearPolygon(tuple(poly))
    return _signed_area2(poly.vertices) // 2


def decompose(poly: RectilinearPolygon) -> tuple[Rect, ...]:
    """Split into disjoint half-open rectangles by horizontal slabs.

    Vertically adjacent slabs with the same x-interval are merged, so a plain
    rectangle comes back as itself.
    """
    pts = poly.vertices
    n = len(pts)
    verticals = []
    for i in range(n):
        p, q = pts[i], pts[(i + 1) % n]
        if p.x == q.x:
            verticals.append((p.x, min(p.y, q.y), max(p.y, q.y)))
    ys = sorted({p.y for p in pts})
    out: list[Rect] = []
    open_rects: dict[tuple[int, int], int] = {}
    for y_lo, y_hi in zip(ys, ys[1:]):
        xs = sorted(x for x, a, b in verticals if a <= y_lo and y_hi <= b)
        intervals = [(xs[k], xs[k + 1]) for k in range(0, len(xs), 2)]
        still_open: dict[tuple[int, int], int] = {}
        for iv in intervals:
            still_open[iv] = open_rects.pop(iv, y_lo)
        for (x0, x1), start in open_rects.items():
            out.append(Rect(x0, start, x1, y_lo))
        open_rects = still_open
        last_y = y_hi
    for (x0, x1), start in open_rects.items():
        out.append(Rect(x0, start, x1, last_y))
    return tuple(sorted(out))


def rects_array(polys: Sequence[RectilinearPolygon]) -> tuple[np.ndarray, np.ndarray]:
    """Stack the rect decompositions: ``(k, 4)`` int64 rects and owner indices."""
    rows: list[tuple[int, int, int, int]] = []
    owners: list[int] = []
    for idx, poly in enumerate(polys):
        for r in poly.rects:
            rows.append((r.x0, r.y0, r.x1, r.y1))
            owners.append(idx)
    if not rows:
        return np.zeros((0, 4), dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.asarray(rows, dtype=np.int64), np.asarray(owners, dtype=np.int64)


def rect_gaps(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.maximum(b[None, :, 0] - a[:, None, 2], a[:, None, 0] - b[None, :, 2])
    gy = np.maximum(b[None, :, 1] - a[:, None, 3], a[:, None, 1] - b[None, :, 3])
    return gx, gy


def pair_spacing(a: RectilinearPolygon, b: RectilinearPolygon) -> float:
    """Euclidean minimum boundary distance between two disjoint polygons.

    Raises :class:`OverlapError` when the interiors overlap; returns 0.0 for
    polygons that touch along an edge or at a corner.
    """
    ra, _ = rects_array([a])
    rb, _ = rects_array([b])
    gx, gy = rect_gaps(ra, rb)
    if np.any((gx < 0) & (gy < 0)):
        raise OverlapError("polygons overlap")
    d2 = np.maximum(gx, 0) ** 2 + np.maximum(gy, 0) ** 2
    return math.sqrt(int(d2.min()))


def pairwise_spacing(polys: Sequence[RectilinearPolygon],
                     cutoff: float | None = None) -> list[tuple[int, int, float]]:
    """Spacing for every polygon pair, optionally only pairs closer than ``cutoff``.

    Overlapping pairs are reported with a distance of -1.0 instead of raising.
    """
    rects, owners = rects_array(polys)
    if len(rects) == 0:
        return []
    gx, gy = rect_gaps(rects, rects)
    overlap = (gx < 0) & (gy < 0)
    d2 = (np.maximum(gx, 0) ** 2 + np.maximum(gy, 0) ** 2).astype(np.float64)
    d2[overlap] = -1.0
    n = len(polys)
    best = np.full((n, n), np.inf)
    oi = owners[:, None].repeat(len(rects), axis=1)
    oj = owners[None, :].repeat(len(rects), axis=0)
    mask = oi < oj
    np.minimum.at(best, (oi[mask], oj[mask]), d2[mask])
    out = []
    for i, j in zip(*np.nonzero(np.isfinite(best))):
        v = best[i, j]
        dist = -1.0 if v < 0 else math.sqrt(v)
        if cutoff is None or dist < cutoff:
            out.append((int(i), int(j), dist))
    return out


def outward_normal(poly: RectilinearPolygon, edge_index: int) -> tuple[int, int]:
    p, q = poly.edge(edge_index)
    dx = (q.x > p.x) - (q.x < p.x)
    dy = (q.y > p.y) - (q.y < p.y)
    return dy, -dx


def move_edge(poly: RectilinearPolygon, edge_index: int, dist: int,
              bounds: Rect | None = CLIP_BOUNDS) -> RectilinearPolygon:
    """Translate one edge perpendicular to itself; positive ``dist`` grows the polygon.

    The two neighbouring edges stretch or shrink to follow. A move that
    collapses an edge, self-intersects, or leaves ``bounds`` raises
    :class:`RejectedMoveError`.
    """
    n = len(poly.vertices)
    if not 0 <= edge_index < n:
        raise RejectedMoveError(f"edge index {edge_index} out of range for {n} edges")
    if dist == 0:
        return poly
    nx, ny = outward_normal(poly, edge_index)
    pts = list(poly.vertices)
    for k in (edge_index, (edge_index + 1) % n):
        pts[k] = Point(pts[k].x + nx * dist, pts[k].y + ny * dist)
    try:
        moved = RectilinearPolygon(tuple(pts))
    except InvalidPolygonError as exc:
        raise RejectedMoveError(str(exc)) from exc
    if bounds is not None and not bounds.contains_rect(moved.bbox):
        raise RejectedMoveError("edge move leaves the clip")
    return moved


@dataclass(frozen=True)
class LayoutClip:
    """A 1110 x 1110 nm window of single-layer metal polygons."""

    id: str
    polygons: tuple[RectilinearPolygon, ...] = ()
    width_nm: int = CLIP_SIZE_NM
    height_nm: int = CLIP_SIZE_NM
    roi: Rect = DEFAULT_ROI
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "polygons", tuple(self.polygons))

    @property
    def bounds(self) -> Rect:
        return Rect(0, 0, self.width_nm, self.height_nm)

    def with_polygons(self, polygons: Iterable[RectilinearPolygon],
                      clip_id: str | None = None) -> LayoutClip:
        return LayoutClip(clip_id or self.id, tuple(polygons), self.width_nm,
                          self.height_nm, self.roi)

    def polygons_intersecting(self, rect: Rect) -> list[int]:
        """Indices of polygons whose interior overlaps ``rect``."""
        hits = []
        for i, poly in enumerate(self.polygons):
            if poly.bbox.intersects(rect) and any(r.intersects(rect) for r in poly.rects):
                hits.append(i)
        return hits


def pixel_span(lo: int, hi: int, pixel_nm: int) -> tuple[int, int]:
    """Pixel index range ``[a, b)`` whose centers fall in ``[lo, hi)``."""
    # center of pixel i is (2i + 1) * p / 2; solve (2i+1)p >= 2*lo
    a = -((pixel_nm - 2 * lo) // (2 * pixel_nm))
    b = -((pixel_nm - 2 * hi) // (2 * pixel_nm))
    return a, b


def raster_shape(extent_nm: int, pixel_nm: int) -> int:
    if pixel_nm <= 0 or extent_nm % pixel_nm:
        raise RasterConfigError(f"pixel pitch {pixel_nm} nm does not divide {extent_nm} nm")
    return extent_nm // pixel_nm


def fill_rects(img: np.ndarray, rects: Iterable[Rect], pixel_nm: int,
               value: int = 1, origin: tuple[int, int] = (0, 0)) -> np.ndarray:
    """Burn half-open rects into ``img`` using the pixel-center rule."""
    ox, oy = origin
    h, w = img.shape
    for r in rects:
        c0, c1 = pixel_span(r.x0 - ox, r.x1 - ox, pixel_nm)
        r0, r1 = pixel_span(r.y0 - oy, r.y1 - oy, pixel_nm)
        c0, c1 = max(c0, 0), min(c1, w)
        r0, r1 = max(r0, 0), min(r1, h)
        if c0 < c1 and r0 < r1:
            img[r0:r1, c0:c1] = value
    return img


def rasterize(clip: LayoutClip, pixel_nm: int) -> np.ndarray:
    """Binary image of the clip: a cell is 1 iff its center lies in a polygon.

    Low polygon edges are inside, high edges outside, so abutting polygons
    never double-count a pixel.
    """
    h = raster_shape(clip.height_nm, pixel_nm)
    w = raster_shape(clip.width_nm, pixel_nm)
    img = np.zeros((h, w), dtype=np.uint8)
    for poly in clip.polygons:
        fill_rects(img, poly.rects, pixel_nm)
    return img


def snap(value: float, grid: int = MANUFACTURING_GRID_NM) -> int:
    return int(round(value / grid)) * grid
