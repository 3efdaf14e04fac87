"""Malicious-designer emulation: a fixed trigger shape, constrained insertion, clean-label poisoning."""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

from .drc import RuleDeck, check_polygons
from .geometry import (
    LayoutClip,
    Point,
    Rect,
    RectilinearPolygon,
    rect_gaps,
    rects_array,
)
from .layout_io import ClipRecord, Poisoned, Sample, Split, clip_path, read_clip_gds
from .litho import Label, LithoConfig, simulate
from .seeding import rng_for


class TriggerError(ValueError):
    pass


class RejectionKind(enum.Enum):
    OVERLAP = "Overlap"
    SPACING = "SpacingViolation"
    OUT_OF_BOUNDS = "OutOfBounds"


@dataclass(frozen=True)
class Rejection:
    kind: RejectionKind
    detail: str = ""


@dataclass(frozen=True)
class Trigger:
    trigger_id: str
    shape: RectilinearPolygon
    anchor: Point

    def placed(self) -> RectilinearPolygon:
        return self.shape.translated(self.anchor[0], self.anchor[1])

    def check(self, deck: RuleDeck, litho: LithoConfig, roi: Rect, bounds: Rect) -> None:
        """Raise TriggerError unless the trigger is width-clean, in bounds and far from the ROI."""
        from .drc import width_violation

        if width_violation(self.shape, deck) is not None:
            raise TriggerError("trigger shape violates the width rule")
        placed = self.placed()
        if not bounds.contains_rect(placed.bbox):
            raise TriggerError("trigger leaves the clip")
        d = roi_distance(placed, roi)
        if d < 4 * litho.sigma_nm:
            raise TriggerError(f"trigger is {d:.1f} nm from the ROI; needs >= {4 * litho.sigma_nm:.1f}")


def roi_distance(poly: RectilinearPolygon, roi: Rect) -> float:
    rp, _ = rects_array([poly])
    rr, _ = rects_array([RectilinearPolygon.from_rect(roi.x0, roi.y0, roi.x1, roi.y1)])
    gx, gy = rect_gaps(rp, rr)
    if ((gx < 0) & (gy < 0)).any():
        return 0.0
    return math.sqrt(int((gx.clip(0) ** 2 + gy.clip(0) ** 2).min()))


def l_shape(size: int = 210, arm: int = 70) -> RectilinearPolygon:
    return RectilinearPolygon.from_points(
        [(0, 0), (size, 0), (size, arm), (arm, arm), (arm, size), (0, size)])


def default_trigger() -> Trigger:
    return Trigger("T0", l_shape(), Point(150, 760))


def load_trigger(path: Union[str, Path], anchor: tuple[int, int], trigger_id: str = "T0") -> Trigger:
    """First boundary of a GDSII file, shifted so its bbox starts at the local origin."""
    clip = read_clip_gds(path)
    if not clip.polygons:
        raise TriggerError(f"{path} holds no boundary")
    poly = clip.polygons[0]
    bb = poly.bbox
    return Trigger(trigger_id, poly.translated(-bb.x0, -bb.y0), Point(*anchor))


def insert_trigger(clip: LayoutClip, trigger: Trigger,
                   deck: RuleDeck | None = None) -> LayoutClip | Rejection:
    """``clip`` plus the trigger at its anchor, or the first constraint it breaks."""
    deck = deck or RuleDeck()
    placed = trigger.placed()
    if not clip.bounds.contains_rect(placed.bbox):
        return Rejection(RejectionKind.OUT_OF_BOUNDS, "trigger leaves the clip")
    if clip.polygons:
        rt, _ = rects_array([placed])
        rc, owners = rects_array(clip.polygons)
        gx, gy = rect_gaps(rt, rc)
        if ((gx <= 0) & (gy <= 0)).any():
            return Rejection(RejectionKind.OVERLAP, "trigger touches an existing polygon")
        d2 = gx.clip(0) ** 2 + gy.clip(0) ** 2
        k = int(d2.argmin())
        if d2.flat[k] < deck.min_spacing_nm ** 2:
            return Rejection(RejectionKind.SPACING,
                             f"{math.sqrt(int(d2.flat[k])):.1f} nm from polygon {int(owners[k % len(owners)])}")
    out = clip.with_polygons(clip.polygons + (placed,))
    for v in check_polygons(out, deck, [len(out.polygons) - 1]):
        kind = RejectionKind.OUT_OF_BOUNDS if v.kind.value == "OutOfBounds" else RejectionKind.SPACING
        return Rejection(kind, f"{v.kind.value} violation")
    return out


@dataclass(frozen=True)
class PoisonConfig:
    trigger: Trigger = field(default_factory=default_trigger)
    target_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.target_fraction <= 1.0:
            raise TriggerError("target_fraction must lie in (0, 1]")


@dataclass
class SideStats:
    attempted: int = 0
    accepted: int = 0
    label_flipped: int = 0
    rejected: dict[str, int] = field(default_factory=lambda: {k.value: 0 for k in RejectionKind})


@dataclass
class PoisonOutcome:
    train: list[Sample] = field(default_factory=list)
    test_nhs: list[Sample] = field(default_factory=list)
    test_hs: list[Sample] = field(default_factory=list)
    test_flipped: list[Sample] = field(default_factory=list)
    train_stats: SideStats = field(default_factory=SideStats)
    test_stats: SideStats = field(default_factory=SideStats)

    def stats_csv(self, digest: str = "") -> str:
        buf = io.StringIO()
        if digest:
            buf.write(f"# config_digest={digest}\n")
        w = csv.writer(buf, lineterminator="\n")
        kinds = [k.value for k in RejectionKind]
        w.writerow(["side", "attempted", "accepted", "label_flipped"] + [f"rejected_{k}" for k in kinds])
        for side, s in (("train", self.train_stats), ("test", self.test_stats)):
            w.writerow([side, s.attempted, s.accepted, s.label_flipped] + [s.rejected[k] for k in kinds])
        return buf.getvalue()


def poisoned_clip_id(parent_id: str, trigger_id: str) -> str:
    return f"{parent_id}_p{trigger_id}"


def _poison_one(sample: Sample, trigger: Trigger, deck: RuleDeck, oracle: LithoConfig,
                stats: SideStats) -> Sample | None:
    stats.attempted += 1
    res = insert_trigger(sample.clip, trigger, deck)
    if isinstance(res, Rejection):
        stats.rejected[res.kind.value] += 1
        return None
    cid = poisoned_clip_id(sample.clip_id, trigger.trigger_id)
    clip = replace(res, id=cid)
    label = simulate(clip, oracle).label
    stats.accepted += 1
    if label != sample.label:
        stats.label_flipped += 1
    rec = ClipRecord(cid, clip_path(cid), label, sample.record.split,
                     Poisoned(sample.clip_id, trigger.trigger_id), sample.record.rng_seed)
    return Sample(rec, clip)


def poison_dataset(samples: Sequence[Sample], cfg: PoisonConfig, oracle: LithoConfig,
                   deck: RuleDeck | None = None) -> PoisonOutcome:
    """Clean-label poisoning of train non-hotspots and of every test clip.

    Train clips that turn into hotspots are dropped. When ``target_fraction``
    is below 1 a seeded subset of the eligible train clips is kept. Test clips
    whose label changes land in ``test_flipped`` and are not part of either
    poisoned test slice.
    """
    deck = deck or RuleDeck()
    out = PoisonOutcome()
    eligible: list[Sample] = []
    for s in samples:
        if s.label is None:
            raise TriggerError(f"record {s.clip_id} has no litho label")
        if s.record.split is Split.TRAIN:
            if s.label is not Label.NON_HOTSPOT:
                continue
            p = _poison_one(s, cfg.trigger, deck, oracle, out.train_stats)
            if p is not None and p.label is Label.NON_HOTSPOT:
                eligible.append(p)
        else:
            p = _poison_one(s, cfg.trigger, deck, oracle, out.test_stats)
            if p is None:
                continue
            if p.label != s.label:
                out.test_flipped.append(p)
            elif p.label is Label.HOTSPOT:
                out.test_hs.append(p)
            else:
                out.test_nhs.append(p)
    if cfg.target_fraction < 1.0 and eligible:
        k = int(round(cfg.target_fraction * len(eligible)))
        rng = rng_for(cfg.seed, "poison-select")
        keep = set(rng.choice(len(eligible), size=k, replace=False).tolist())
        eligible = [p for i, p in enumerate(eligible) if i in keep]
    out.train = eligible
    return out
