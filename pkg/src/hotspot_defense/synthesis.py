"""Procedural clip corpus, synthetic variant generation, defensive augmentation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields
from typing import Mapping

import numpy as np

from .drc import RuleDeck, check_clip
from .geometry import (
    CLIP_SIZE_NM,
    LayoutClip,
    Rect,
    RectilinearPolygon,
)
from .seeding import rng_for

logger = logging.getLogger(__name__)


class SynthesisError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusParams:
    clip_count: int = 0
    track_pitch_nm: int = 240
    wire_width_nm: int = 90
    jog_probability: float = 0.15
    near_min_spacing_probability: float = 0.3
    seed: int = 0
    near_miss_probability: float = 0.08
    near_miss_slack_nm: int = 5
    bulge_min_nm: int = 250
    bulge_max_nm: int = 400
    central_bulge_probability: float = 0.8
    central_window_nm: int = 600
    tip_near_min_probability: float = 0.0
    wide_wire_probability: float = 0.2
    empty_track_probability: float = 0.12
    whitespace_probability: float = 0.6
    corner_whitespace_probability: float = 0.8
    whitespace_min_nm: int = 425
    whitespace_max_nm: int = 480
    min_segment_nm: int = 80

    def __post_init__(self) -> None:
        for name in ("jog_probability", "near_min_spacing_probability", "near_miss_probability",
                     "tip_near_min_probability", "wide_wire_probability", "central_bulge_probability",
                     "empty_track_probability", "whitespace_probability",
                     "corner_whitespace_probability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SynthesisError(f"{name} must lie in [0, 1]")
        if self.near_min_spacing_probability + self.near_miss_probability > 1.0:
            raise SynthesisError("near-min and near-miss probabilities sum above 1")
        if self.clip_count < 0:
            raise SynthesisError("clip_count must be non-negative")
        for name in ("track_pitch_nm", "wire_width_nm", "near_miss_slack_nm", "bulge_min_nm",
                     "bulge_max_nm", "central_window_nm", "whitespace_min_nm", "whitespace_max_nm", "min_segment_nm"):
            if getattr(self, name) % 5:
                raise SynthesisError(f"{name} must lie on the 5 nm grid")
        if self.bulge_min_nm > self.bulge_max_nm or self.whitespace_min_nm > self.whitespace_max_nm:
            raise SynthesisError("empty size range")

    @classmethod
    def from_mapping(cls, data: Mapping[str, object] | None) -> CorpusParams:
        return _from_mapping(cls, data)


def _from_mapping(cls, data):
    data = dict(data or {})
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise SynthesisError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for k, v in data.items():
        default = known[k].default
        kw[k] = type(default)(v) if isinstance(default, (int, float)) and not isinstance(default, bool) else v
    return cls(**kw)


# -- corpus ------------------------------------------------------------------

def _grid_uniform(rng: np.random.Generator, lo: int, hi: int, grid: int) -> int:
    return int(rng.integers(lo // grid, hi // grid + 1)) * grid


@dataclass
class _Track:
    lo: int
    hi: int
    empty: bool
    segments: list = field(default_factory=list)


def _tracks(rng: np.random.Generator, p: CorpusParams, deck: RuleDeck) -> list[_Track]:
    """Wires on a fixed routing grid whose middle gap straddles the clip centre.

    Wide wires grow symmetrically about their track.
    """
    g = deck.grid_nm
    out = []
    first = (CLIP_SIZE_NM // 2 + p.track_pitch_nm // 2) % p.track_pitch_nm
    centre = first if first >= p.wire_width_nm // 2 else first + p.track_pitch_nm
    while centre + p.wire_width_nm // 2 <= CLIP_SIZE_NM:
        w = p.wire_width_nm
        if rng.random() < p.wide_wire_probability:
            w += 2 * g * int(rng.integers(1, 4))
        lo = (centre - w // 2) // g * g
        if lo < 0 or lo + w > CLIP_SIZE_NM:
            break
        out.append(_Track(lo, lo + w, rng.random() < p.empty_track_probability))
        centre += p.track_pitch_nm
    return out


def _whitespace(rng: np.random.Generator, p: CorpusParams, deck: RuleDeck) -> Rect | None:
    if rng.random() >= p.whitespace_probability:
        return None
    g = deck.grid_nm
    w = _grid_uniform(rng, p.whitespace_min_nm, p.whitespace_max_nm, g)
    h = _grid_uniform(rng, p.whitespace_min_nm, p.whitespace_max_nm, g)
    if rng.random() < p.corner_whitespace_probability:
        # empty block flush with a clip corner
        x0 = int(rng.choice([0, CLIP_SIZE_NM - w]))
        y0 = int(rng.choice([0, CLIP_SIZE_NM - h]))
    else:
        x0 = _grid_uniform(rng, 0, CLIP_SIZE_NM - w, g)
        y0 = _grid_uniform(rng, 0, CLIP_SIZE_NM - h, g)
    return Rect(x0, y0, x0 + w, y0 + h)


def _segments(rng: np.random.Generator, p: CorpusParams, deck: RuleDeck) -> list[tuple[int, int]]:
    g = deck.grid_nm
    out = []
    x = 0 if rng.random() < 0.6 else _grid_uniform(rng, 0, 300, g)
    while x + p.min_segment_nm <= CLIP_SIZE_NM:
        length = _grid_uniform(rng, 150, 900, g)
        end = min(x + length, CLIP_SIZE_NM)
        if CLIP_SIZE_NM - end < deck.min_spacing_nm + p.min_segment_nm:
            end = CLIP_SIZE_NM
        out.append((x, end))
        if rng.random() < p.tip_near_min_probability:
            gap = deck.min_spacing_nm
        else:
            gap = _grid_uniform(rng, p.track_pitch_nm - p.wire_width_nm, 300, g)
        x = end + gap
    return out


def _cut(seg: tuple[int, int], keep_out: Rect | None, y0: int, y1: int,
         min_len: int) -> list[tuple[int, int]]:
    if keep_out is None or y1 <= keep_out.y0 or y0 >= keep_out.y1:
        return [seg]
    a, b = seg
    pieces = [(a, min(b, keep_out.x0)), (max(a, keep_out.x1), b)]
    return [(s, e) for s, e in pieces if e - s >= min_len]


def _jogged(x0: int, x1: int, y: int, w: int, rng: np.random.Generator,
            room_below: int, room_above: int, deck: RuleDeck) -> RectilinearPolygon:
    """Wire with one step on its top or bottom edge; the step keeps DRC slack."""
    g = deck.grid_nm
    xj = _grid_uniform(rng, x0 + 100, x1 - 100, g)
    s = _grid_uniform(rng, 10, 30, g)
    top = rng.random() < 0.5
    outward = rng.random() < 0.5
    room = room_above if top else room_below
    if outward and room - s < deck.min_spacing_nm:
        outward = False
    if not outward and w - s < deck.min_width_nm:
        return RectilinearPolygon.from_rect(x0, y, x1, y + w)
    d = s if outward else -s
    if top:
        pts = [(x0, y), (x1, y), (x1, y + w + d), (xj, y + w + d), (xj, y + w), (x0, y + w)]
    else:
        pts = [(x0, y), (xj, y), (xj, y - d), (x1, y - d), (x1, y + w), (x0, y + w)]
    return RectilinearPolygon.from_points(pts)


def _bulged(x0: int, x1: int, y: int, w: int, b0: int, b1: int, up: bool,
            amount: int) -> RectilinearPolygon:
    """Wire whose top (``up``) or bottom edge widens by ``amount`` over [b0, b1)."""
    if up:
        t = y + w
        pts = [(x0, y), (x1, y), (x1, t), (b1, t), (b1, t + amount), (b0, t + amount), (b0, t), (x0, t)]
    else:
        pts = [(x0, y), (b0, y), (b0, y - amount), (b1, y - amount), (b1, y), (x1, y), (x1, y + w),
               (x0, y + w)]
    # drop the collinear corners a flush bulge end leaves behind
    keep = []
    n = len(pts)
    for i, q in enumerate(pts):
        a, c = pts[i - 1], pts[(i + 1) % n]
        if not ((a[0] == q[0] == c[0]) or (a[1] == q[1] == c[1])):
            keep.append(q)
    return RectilinearPolygon.from_points(keep)


def _transpose(poly: RectilinearPolygon) -> RectilinearPolygon:
    return RectilinearPolygon.from_points([(v.y, v.x) for v in poly.vertices])


def _plan_bulges(rng: np.random.Generator, tracks: list[_Track], p: CorpusParams,
                 deck: RuleDeck) -> dict[int, tuple[int, int, bool, int]]:
    """Per track index: (b0, b1, grows_up, amount) for a local widening toward a neighbour.

    The widening sits inside one segment of the growing wire, its position
    uniform over all room the wire offers, or over the part of that room
    within a window centred on the clip when the widening is central.
    """
    g = deck.grid_nm
    plan: dict[int, tuple[int, int, bool, int]] = {}
    for k in range(len(tracks) - 1):
        lo, hi = tracks[k], tracks[k + 1]
        r = rng.random()
        length = _grid_uniform(rng, p.bulge_min_nm, p.bulge_max_nm, g)
        grows_up = rng.random() < 0.5
        pick = rng.random()
        central = rng.random() < p.central_bulge_probability
        if lo.empty or hi.empty:
            continue
        if r < p.near_min_spacing_probability:
            target = deck.min_spacing_nm
        elif r < p.near_min_spacing_probability + p.near_miss_probability:
            target = deck.min_spacing_nm + p.near_miss_slack_nm
        else:
            continue
        amount = (hi.lo - lo.hi) - target
        owner = k if grows_up else k + 1
        if amount <= 0 or owner in plan:
            continue
        lo_x, hi_x = 0, CLIP_SIZE_NM
        if central:
            lo_x = (CLIP_SIZE_NM - p.central_window_nm) // 2 // g * g
            hi_x = lo_x + p.central_window_nm
        spans = [(max(a, lo_x), min(b, hi_x)) for a, b in tracks[owner].segments]
        room = [(a, (b - a - length) // g + 1) for a, b in spans if b - a >= length]
        total = sum(n for _, n in room)
        if not total:
            continue
        slot = int(pick * total)
        for a, n in room:
            if slot < n:
                b0 = a + slot * g
                break
            slot -= n
        plan[owner] = (b0, b0 + length, grows_up, amount)
    return plan


def generate_clip(clip_id: str, rng: np.random.Generator, p: CorpusParams,
                  deck: RuleDeck | None = None) -> LayoutClip:
    deck = deck or RuleDeck()
    vertical = rng.random() < 0.5
    tracks = _tracks(rng, p, deck)
    keep_out = _whitespace(rng, p, deck)
    for t in tracks:
        t.segments = [piece for seg in _segments(rng, p, deck)
                      for piece in _cut(seg, keep_out, t.lo, t.hi, p.min_segment_nm)]
    bulges = _plan_bulges(rng, tracks, p, deck)
    polys: list[RectilinearPolygon] = []
    for k, t in enumerate(tracks):
        if t.empty:
            continue
        w = t.hi - t.lo
        below = t.lo - tracks[k - 1].hi if k > 0 else t.lo
        above = tracks[k + 1].lo - t.hi if k + 1 < len(tracks) else CLIP_SIZE_NM - t.hi
        # a neighbour's bulge eats into the room a jog may use
        if k > 0 and k - 1 in bulges and bulges[k - 1][2]:
            below -= bulges[k - 1][3]
        if k + 1 < len(tracks) and k + 1 in bulges and not bulges[k + 1][2]:
            above -= bulges[k + 1][3]
        bulge = bulges.get(k)
        for x0, x1 in t.segments:
            if bulge is not None and x0 <= bulge[0] and bulge[1] <= x1:
                b0, b1, up, amount = bulge
                poly = _bulged(x0, x1, t.lo, w, b0, b1, up, amount)
                bulge = None
            elif x1 - x0 >= 300 and rng.random() < p.jog_probability:
                poly = _jogged(x0, x1, t.lo, w, rng, below, above, deck)
            else:
                poly = RectilinearPolygon.from_rect(x0, t.lo, x1, t.hi)
            polys.append(poly)
    if vertical:
        polys = [_transpose(q) for q in polys]
    clip = LayoutClip(clip_id, tuple(polys))
    # jog steps can still collide with a neighbour's jog; drop offenders until clean
    while True:
        bad = _first_offender(clip, deck)
        if bad is None:
            return clip
        clip = clip.with_polygons(q for i, q in enumerate(clip.polygons) if i != bad)


def _first_offender(clip: LayoutClip, deck: RuleDeck) -> int | None:
    if not check_clip(clip, deck):
        return None
    from .drc import check_polygons
    for i in range(len(clip.polygons)):
        if check_polygons(clip, deck, [i]):
            return i
    return None


def corpus_clip_id(index: int) -> str:
    return f"c{index:06d}"


def generate_corpus(params: CorpusParams, deck: RuleDeck | None = None,
                    start: int = 0) -> list[LayoutClip]:
    """``params.clip_count`` DRC-clean clips; clip ``i`` depends only on (seed, i)."""
    return [generate_clip(corpus_clip_id(i), rng_for(params.seed, "corpus", i), params, deck)
            for i in range(start, start + params.clip_count)]


# -- synthetic variants ------------------------------------------------------

@dataclass(frozen=True)
class GenParams:
    variant_count: int = 1
    vary_edge_count: int = 2
    additional_polygon_count: int = 2
    displacement_std_nm: float = 15.0
    displacement_max_nm: int = 40
    grid_nm: int = 5
    retry_limit: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.variant_count < 0:
            raise SynthesisError("variant_count must be non-negative")
        if self.vary_edge_count < 1:
            raise SynthesisError("vary_edge_count must be at least 1")
        if self.additional_polygon_count < 0 or self.retry_limit < 0:
            raise SynthesisError("counts must be non-negative")
        if self.displacement_max_nm % self.grid_nm:
            raise SynthesisError("displacement_max_nm must sit on the grid")

    @classmethod
    def from_mapping(cls, data: Mapping[str, object] | None) -> GenParams:
        return _from_mapping(cls, data)

    def displacement_pmf(self) -> tuple[np.ndarray, np.ndarray]:
        """Support and probabilities of the truncated, grid-snapped Gaussian."""
        g = self.grid_nm
        support = np.arange(-self.displacement_max_nm, self.displacement_max_nm + g, g)
        if self.displacement_std_nm <= 0:
            probs = (support == 0).astype(float)
        else:
            probs = np.exp(-0.5 * (support / self.displacement_std_nm) ** 2)
        return support, probs / probs.sum()


@dataclass(frozen=True)
class Variant:
    index: int
    clip: LayoutClip


@dataclass
class VariantSet:
    parent_id: str
    variants: list[Variant]
    attempted: int
    drc_failed: int

    def __iter__(self):
        return iter(self.variants)

    def __len__(self) -> int:
        return len(self.variants)


def variant_clip_id(parent_id: str, index: int) -> str:
    return f"{parent_id}_v{index:04d}"


def sample_displacement(rng: np.random.Generator, support: np.ndarray, probs: np.ndarray) -> int:
    return int(support[rng.choice(len(support), p=probs)])


def _vary(parent: LayoutClip, index: int, params: GenParams,
          support: np.ndarray, probs: np.ndarray) -> tuple[LayoutClip, list[int]]:
    from .geometry import RejectedMoveError, move_edge

    rng = rng_for(params.seed, parent.id, index)
    pois = parent.polygons_intersecting(parent.roi)
    others = [i for i in range(len(parent.polygons)) if i not in set(pois)]
    k = min(params.additional_polygon_count, len(others))
    if k:
        pois = pois + [others[j] for j in rng.choice(len(others), size=k, replace=False)]
    polys = list(parent.polygons)
    changed = []
    for pi in pois:
        poly = polys[pi]
        for _ in range(params.vary_edge_count):
            for _attempt in range(params.retry_limit + 1):
                edge = int(rng.integers(poly.edge_count))
                dist = sample_displacement(rng, support, probs)
                try:
                    poly = move_edge(poly, edge, dist, parent.bounds)
                    break
                except RejectedMoveError:
                    continue
        if poly != polys[pi]:
            polys[pi] = poly
            changed.append(pi)
    return parent.with_polygons(polys, variant_clip_id(parent.id, index)), changed


def gen_variants(parent: LayoutClip, params: GenParams, deck: RuleDeck | None = None,
                 indices: range | None = None) -> VariantSet:
    """Synthetic variants of ``parent``: perturb ROI polygons plus a few others.

    Each variant starts from the parent. DRC-failing variants are dropped and
    counted; ``indices`` restricts generation to a sub-range of variant indices
    (variant ``i`` is the same clip whichever range it is generated in).
    """
    from .drc import check_polygons

    if not parent.polygons:
        raise SynthesisError(f"clip {parent.id} has no polygons to vary")
    deck = deck or RuleDeck()
    support, probs = params.displacement_pmf()
    indices = range(params.variant_count) if indices is None else indices
    kept: list[Variant] = []
    failed = 0
    for i in indices:
        clip, changed = _vary(parent, i, params, support, probs)
        if changed and check_polygons(clip, deck, changed):
            failed += 1
            continue
        kept.append(Variant(i, clip))
    return VariantSet(parent.id, kept, len(indices), failed)


# -- defensive augmentation ----------------------------------------------------

@dataclass(frozen=True)
class ParentOutcome:
    """Fresh labels of the DRC-clean variants of one parent, keyed by variant index."""

    parent_id: str
    parent_label: str
    attempted: int
    labels: Mapping[int, str]

    def truncated(self, level: int) -> ParentOutcome:
        return ParentOutcome(self.parent_id, self.parent_label, min(self.attempted, level),
                             {i: l for i, l in self.labels.items() if i < level})

    @property
    def kept_hs(self) -> int:
        return sum(1 for l in self.labels.values() if l == "Hotspot")

    @property
    def kept_nhs(self) -> int:
        return len(self.labels) - self.kept_hs

    @property
    def drc_failed(self) -> int:
        return self.attempted - len(self.labels)


@dataclass
class AugmentResult:
    samples: list = field(default_factory=list)
    outcomes: list[ParentOutcome] = field(default_factory=list)

    def at_level(self, level: int) -> AugmentResult:
        """The nested subset produced by variant indices below ``level``."""
        return AugmentResult([s for s in self.samples if s.record.provenance.variant_index < level],
                             [o.truncated(level) for o in self.outcomes])

    def yield_csv(self, digest: str = "") -> str:
        buf = io.StringIO()
        if digest:
            buf.write(f"# config_digest={digest}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["parent_id", "attempted", "drc_failed", "kept_hs", "kept_nhs"])
        for o in self.outcomes:
            w.writerow([o.parent_id, o.attempted, o.drc_failed, o.kept_hs, o.kept_nhs])
        return buf.getvalue()

    def cross_class_rate(self) -> float:
        """Fraction of DRC-clean variants of non-hotspot parents that are hotspots."""
        nh = [o for o in self.outcomes if o.parent_label == "NonHotspot"]
        total = sum(len(o.labels) for o in nh)
        return sum(o.kept_hs for o in nh) / total if total else 0.0


def augment_parent(sample, params: GenParams, oracle, deck: RuleDeck | None = None,
                   indices: range | None = None):
    """Variants of one labeled training sample under the retention policy.

    Hotspot parents keep every DRC-clean variant; non-hotspot parents keep
    only variants that simulate as hotspots. Returns (kept samples, outcome).
    """
    from .layout_io import ClipRecord, Sample, Split, VariantOf, clip_path
    from .litho import Label, simulate
    from .seeding import derive_seed

    if sample.label is None:
        raise SynthesisError(f"record {sample.clip_id} has no litho label")
    hs_parent = sample.label is Label.HOTSPOT
    vs = gen_variants(sample.clip, params, deck, indices)
    kept: list = []
    labels: dict[int, str] = {}
    for v in vs:
        label = simulate(v.clip, oracle).label
        labels[v.index] = label.value
        if hs_parent or label is Label.HOTSPOT:
            rec = ClipRecord(v.clip.id, clip_path(v.clip.id), label, Split.TRAIN,
                             VariantOf(sample.clip_id, v.index),
                             derive_seed(params.seed, sample.clip_id, v.index))
            kept.append(Sample(rec, v.clip))
    return kept, ParentOutcome(sample.clip_id, sample.label.value, vs.attempted, labels)


def defensive_augment(train, params: GenParams, oracle, deck: RuleDeck | None = None,
                      jobs: int = 1) -> AugmentResult:
    """Augmented records for every training sample (clean and poisoned alike), in input order.

    With ``variant_count`` 0 nothing is added; callers keep the originals.
    Parents without polygons have nothing to vary and are skipped.
    """
    from .parallel import parallel_map

    out = AugmentResult()
    if params.variant_count == 0:
        return out
    work = [s for s in train if s.clip.polygons]
    results = parallel_map(_augment_task, [(s, params, oracle, deck) for s in work], jobs)
    for kept, outcome in results:
        out.samples.extend(kept)
        out.outcomes.append(outcome)
    return out


def _augment_task(args):
    sample, params, oracle, deck = args
    return augment_parent(sample, params, oracle, deck)
