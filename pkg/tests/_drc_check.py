"""Compares the geometric spacing checker with the pixel brute force."""

from _oracles import SMALL, brute_spacing
from hotspot_defense.drc import ViolationKind, check_clip
from hotspot_defense.geometry import LayoutClip, Rect, RectilinearPolygon


def small_clip(rects):
    return LayoutClip("s", tuple(RectilinearPolygon.from_rect(*r) for r in rects),
                      SMALL, SMALL, Rect(0, 0, 5, 5))


def _union(a, b):
    return Rect(min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def spacing_mismatches(rects, deck):
    """Locations where the checker and the raster distances disagree beyond 1 nm.

    A violation's location is the union of the pair's bboxes, which two pairs
    can share, so measurements are compared as lists per location.
    """
    found: dict = {}
    for v in check_clip(small_clip(rects), deck):
        if v.kind is ViolationKind.SPACING:
            found.setdefault(v.location, []).append(v.measured)
    must, may = {}, {}
    for i in range(len(rects)):
        for j in range(i + 1, len(rects)):
            d = brute_spacing([rects[i]], [rects[j]])
            loc = _union(rects[i], rects[j])
            if d <= deck.min_spacing_nm - 1:
                must.setdefault(loc, []).append(d)
            elif d < deck.min_spacing_nm + 1:
                may.setdefault(loc, []).append(d)
    bad = []
    for loc in set(found) | set(must):
        got = sorted(found.get(loc, []))
        need = sorted(must.get(loc, []))
        extra = sorted(may.get(loc, []))
        if not len(need) <= len(got) <= len(need) + len(extra):
            bad.append((loc, need, got))
            continue
        # greedy match of each required distance to a reported one
        pool = list(got)
        for d in need:
            hit = next((m for m in pool if abs(m - d) <= 1.0), None)
            if hit is None:
                bad.append((loc, need, got))
                break
            pool.remove(hit)
    return bad
