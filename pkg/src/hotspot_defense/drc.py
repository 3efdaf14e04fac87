"""Two-rule design-rule checker: minimum width and minimum spacing.

Width is checked per polygon by morphological opening of its grid-resolution
raster with a ``min_width``-sized square; a polygon is wide enough iff the
opening leaves the raster unchanged. Spacing is the Euclidean polygon-pair
distance from :func:`geometry.pair_spacing` semantics.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .geometry import (
    LayoutClip,
    Rect,
    RectilinearPolygon,
    fill_rects,
    rect_gaps,
    rects_array,
)


class DrcConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RuleDeck:
    min_width_nm: int = 65
    min_spacing_nm: int = 65
    grid_nm: int = 5

    def __post_init__(self) -> None:
        for name in ("min_width_nm", "min_spacing_nm", "grid_nm"):
            if int(getattr(self, name)) <= 0:
                raise DrcConfigError(f"{name} must be positive")
        if self.min_width_nm % self.grid_nm or self.min_spacing_nm % self.grid_nm:
            raise DrcConfigError("min_width_nm and min_spacing_nm must be multiples of grid_nm")

    @classmethod
    def from_mapping(cls, data: Mapping[str, object] | None) -> RuleDeck:
        data = dict(data or {})
        unknown = set(data) - {"min_width_nm", "min_spacing_nm", "grid_nm"}
        if unknown:
            raise DrcConfigError(f"unknown rule deck keys: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in data.items()})


class ViolationKind(enum.Enum):
    WIDTH = "Width"
    SPACING = "Spacing"
    OFF_GRID = "OffGrid"
    OUT_OF_BOUNDS = "OutOfBounds"


_KIND_ORDER = {k: i for i, k in enumerate(ViolationKind)}


@dataclass(frozen=True)
class DrcViolation:
    kind: ViolationKind
    location: Rect
    measured: float
    required: int

    def sort_key(self) -> tuple:
        loc = self.location
        return (_KIND_ORDER[self.kind], loc.x0, loc.y0, loc.x1, loc.y1, self.measured)


def _opened(mask: np.ndarray, size: int) -> np.ndarray:
    return ndimage.grey_opening(mask, size=(size, size), mode="constant", cval=0)


def _polygon_mask(poly: RectilinearPolygon, grid: int, pad: int) -> tuple[np.ndarray, int, int]:
    bb = poly.bbox
    ox = bb.x0 - pad * grid
    oy = bb.y0 - pad * grid
    w = -(-(bb.x1 - bb.x0) // grid) + 2 * pad
    h = -(-(bb.y1 - bb.y0) // grid) + 2 * pad
    mask = np.zeros((h, w), dtype=np.uint8)
    fill_rects(mask, poly.rects, grid, origin=(ox, oy))
    return mask, ox, oy


def width_violation(poly: RectilinearPolygon, deck: RuleDeck) -> DrcViolation | None:
    k = deck.min_width_nm // deck.grid_nm
    mask, ox, oy = _polygon_mask(poly, deck.grid_nm, pad=k)
    diff = mask != _opened(mask, k)
    if not diff.any():
        return None
    rows, cols = np.nonzero(diff)
    g = deck.grid_nm
    loc = Rect(ox + int(cols.min()) * g, oy + int(rows.min()) * g,
               ox + (int(cols.max()) + 1) * g, oy + (int(rows.max()) + 1) * g)
    # widest square that still fits everywhere = measured minimum width
    lo, hi = 0, k - 1
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if np.array_equal(mask, _opened(mask, mid)):
            lo = mid
        else:
            hi = mid - 1
    return DrcViolation(ViolationKind.WIDTH, loc, float(lo * g), deck.min_width_nm)


def _spacing_violations(polys: Sequence[RectilinearPolygon], deck: RuleDeck,
                        focus: set[int] | None) -> list[DrcViolation]:
    rects, owners = rects_array(polys)
    if len(rects) < 2:
        return []
    gx, gy = rect_gaps(rects, rects)
    overlap = (gx < 0) & (gy < 0)
    d2 = np.maximum(gx, 0) ** 2 + np.maximum(gy, 0) ** 2
    d2 = np.where(overlap, -1, d2)
    pair = owners[:, None] < owners[None, :]
    if focus is not None:
        f = np.isin(owners, sorted(focus))
        pair &= f[:, None] | f[None, :]
    close = pair & (d2 < deck.min_spacing_nm ** 2)
    best: dict[tuple[int, int], tuple[int, int, int]] = {}
    for a, b in zip(*np.nonzero(close)):
        key = (int(owners[a]), int(owners[b]))
        cand = (int(d2[a, b]), int(a), int(b))
        if key not in best or cand < best[key]:
            best[key] = cand
    out = []
    for (i, j), (dd, a, b) in sorted(best.items()):
        ra, rb = rects[a], rects[b]
        loc = Rect(int(min(ra[0], rb[0])), int(min(ra[1], rb[1])),
                   int(max(ra[2], rb[2])), int(max(ra[3], rb[3])))
        measured = 0.0 if dd < 0 else math.sqrt(dd)
        out.append(DrcViolation(ViolationKind.SPACING, loc, measured, deck.min_spacing_nm))
    return out


def _frame_violations(clip: LayoutClip, poly: RectilinearPolygon,
                      deck: RuleDeck) -> list[DrcViolation]:
    out = []
    bb = poly.bbox
    if any(p.x % deck.grid_nm or p.y % deck.grid_nm for p in poly.vertices):
        out.append(DrcViolation(ViolationKind.OFF_GRID, bb, 0.0, 0))
    if not clip.bounds.contains_rect(bb):
        out.append(DrcViolation(ViolationKind.OUT_OF_BOUNDS, bb, 0.0, 0))
    return out


def check_polygons(clip: LayoutClip, deck: RuleDeck,
                   indices: Iterable[int] | None = None) -> list[DrcViolation]:
    """Violations involving the given polygon indices (all polygons if None)."""
    polys = clip.polygons
    focus = None if indices is None else set(indices)
    targets = range(len(polys)) if focus is None else sorted(focus)
    out: list[DrcViolation] = []
    for i in targets:
        poly = polys[i]
        out.extend(_frame_violations(clip, poly, deck))
        v = width_violation(poly, deck)
        if v is not None:
            out.append(v)
    out.extend(_spacing_violations(polys, deck, focus))
    out.sort(key=DrcViolation.sort_key)
    return out


def check_clip(clip: LayoutClip, deck: RuleDeck | None = None) -> list[DrcViolation]:
    """All violations in ``clip``; an empty list means DRC-clean."""
    return check_polygons(clip, deck or RuleDeck())


def is_clean(clip: LayoutClip, deck: RuleDeck | None = None) -> bool:
    return not check_clip(clip, deck)
