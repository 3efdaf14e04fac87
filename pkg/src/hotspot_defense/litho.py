"""Surrogate lithography: Gaussian aerial image, threshold resist, defect markers.

The aerial image is the rasterized mask convolved with a unit-mass Gaussian
(reflective border). Because every mask is a union of axis-aligned rects and
the kernel is separable, the convolution is evaluated as ``FY @ FX.T`` where
each column of ``FX``/``FY`` is a 1-D blurred interval indicator. The 1-D
operator comes from :func:`scipy.ndimage.gaussian_filter1d` applied to the
identity, so results match ``ndimage.gaussian_filter`` on the raster.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .geometry import (
    LayoutClip,
    Rect,
    fill_rects,
    pixel_span,
    raster_shape,
    rasterize,
)

logger = logging.getLogger(__name__)

# kernel support in standard deviations
GAUSS_TRUNCATE = 4.0


class Label(enum.Enum):
    HOTSPOT = "Hotspot"
    NON_HOTSPOT = "NonHotspot"

    @property
    def is_hotspot(self) -> bool:
        return self is Label.HOTSPOT

    @classmethod
    def from_bool(cls, hotspot: bool) -> Label:
        return cls.HOTSPOT if hotspot else cls.NON_HOTSPOT


class MarkerKind(enum.Enum):
    PINCH = "Pinch"
    BRIDGE = "Bridge"


class LithoConfigError(ValueError):
    pass


class CalibrationError(RuntimeError):
    def __init__(self, message: str, best: CalibrationCandidate | None = None,
                 candidates: Sequence[CalibrationCandidate] = ()):
        super().__init__(message)
        self.best = best
        self.candidates = list(candidates)


@dataclass(frozen=True)
class LithoConfig:
    pixel_nm: int = 3
    sigma_nm: float = 25.0
    threshold: float = 0.45
    min_marker_area_nm2: int = 1000
    dilation_margin_nm: int = 20

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise LithoConfigError("threshold must lie in (0, 1)")
        if self.sigma_nm <= 0:
            raise LithoConfigError("sigma_nm must be positive")
        if self.pixel_nm <= 0:
            raise LithoConfigError("pixel_nm must be positive")

    @classmethod
    def from_mapping(cls, data: Mapping[str, object] | None) -> LithoConfig:
        data = dict(data or {})
        kw = {}
        for f in ("pixel_nm", "min_marker_area_nm2", "dilation_margin_nm"):
            if f in data:
                kw[f] = int(data.pop(f))
        for f in ("sigma_nm", "threshold"):
            if f in data:
                kw[f] = float(data.pop(f))
        if data:
            raise LithoConfigError(f"unknown litho keys: {sorted(data)}")
        return cls(**kw)

    def as_dict(self) -> dict:
        return {
            "pixel_nm": self.pixel_nm,
            "sigma_nm": self.sigma_nm,
            "threshold": self.threshold,
            "min_marker_area_nm2": self.min_marker_area_nm2,
            "dilation_margin_nm": self.dilation_margin_nm,
        }


@dataclass(frozen=True)
class ErrorMarker:
    rect: Rect
    kind: MarkerKind
    area: int  # component pixel area in nm^2, not rect area


@dataclass(frozen=True)
class LithoResult:
    printed: np.ndarray = field(repr=False, compare=False)
    markers: tuple[ErrorMarker, ...]
    label: Label


@lru_cache(maxsize=16)
def _blur_operator(n: int, sigma_px: float) -> np.ndarray:
    """Cumulative 1-D blur operator: column j holds the response to indicator [0, j)."""
    k = ndimage.gaussian_filter1d(np.eye(n), sigma_px, axis=0, mode="reflect",
                                  truncate=GAUSS_TRUNCATE)
    cum = np.zeros((n, n + 1))
    np.cumsum(k, axis=1, out=cum[:, 1:])
    cum.setflags(write=False)
    return cum


def _pixel_rects(clip: LayoutClip, pixel_nm: int) -> np.ndarray:
    spans = []
    for poly in clip.polygons:
        for r in poly.rects:
            c0, c1 = pixel_span(r.x0, r.x1, pixel_nm)
            r0, r1 = pixel_span(r.y0, r.y1, pixel_nm)
            spans.append((r0, r1, c0, c1))
    return np.asarray(spans, dtype=np.int64).reshape(-1, 4)


def aerial_image(clip: LayoutClip, pixel_nm: int, sigma_nm: float,
                 mask: np.ndarray | None = None) -> np.ndarray:
    """Blurred mask intensity in [0, 1] on the ``pixel_nm`` grid."""
    h = raster_shape(clip.height_nm, pixel_nm)
    w = raster_shape(clip.width_nm, pixel_nm)
    if mask is None:
        mask = rasterize(clip, pixel_nm)
    sigma_px = sigma_nm / pixel_nm
    spans = _pixel_rects(clip, pixel_nm)
    if len(spans):
        spans[:, 0:2] = np.clip(spans[:, 0:2], 0, h)
        spans[:, 2:4] = np.clip(spans[:, 2:4], 0, w)
        keep = (spans[:, 0] < spans[:, 1]) & (spans[:, 2] < spans[:, 3])
        spans = spans[keep]
    covered = int(((spans[:, 1] - spans[:, 0]) * (spans[:, 3] - spans[:, 2])).sum()) if len(spans) else 0
    if covered != int(mask.sum()):
        # overlapping polygons: fall back to the dense filter on the binary mask
        return ndimage.gaussian_filter(mask.astype(np.float64), sigma_px, mode="reflect",
                                       truncate=GAUSS_TRUNCATE)
    if not len(spans):
        return np.zeros((h, w))
    cy = _blur_operator(h, sigma_px)
    cx = cy if w == h else _blur_operator(w, sigma_px)
    fy = cy[:, spans[:, 1]] - cy[:, spans[:, 0]]
    fx = cx[:, spans[:, 3]] - cx[:, spans[:, 2]]
    return fy @ fx.T


def _component_markers(defect: np.ndarray, pixel_nm: int, min_area: int,
                       kind: MarkerKind) -> list[tuple[ErrorMarker, np.ndarray, tuple[slice, slice]]]:
    if not defect.any():
        return []
    labels, n = ndimage.label(defect)
    if n == 0:
        return []
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    out = []
    px2 = pixel_nm * pixel_nm
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None or sizes[idx] * px2 < min_area:
            continue
        rs, cs = sl
        rect = Rect(cs.start * pixel_nm, rs.start * pixel_nm, cs.stop * pixel_nm, rs.stop * pixel_nm)
        out.append((ErrorMarker(rect, kind, int(sizes[idx]) * px2), labels[sl] == idx, sl))
    return out


def _touches_two_polygons(comp: np.ndarray, sl: tuple[slice, slice], clip: LayoutClip,
                          cfg: LithoConfig, shape: tuple[int, int]) -> bool:
    p = cfg.pixel_nm
    rs, cs = sl
    r0, r1 = max(rs.start - 1, 0), min(rs.stop + 1, shape[0])
    c0, c1 = max(cs.start - 1, 0), min(cs.stop + 1, shape[1])
    grown = np.zeros((r1 - r0, c1 - c0), dtype=bool)
    grown[rs.start - r0:rs.stop - r0, cs.start - c0:cs.stop - c0] = comp
    grown = ndimage.binary_dilation(grown, structure=np.ones((3, 3), bool))
    window = Rect(c0 * p, r0 * p, c1 * p, r1 * p)
    m = cfg.dilation_margin_nm
    hits = 0
    for poly in clip.polygons:
        if not poly.bbox.expanded(m).intersects(window):
            continue
        local = np.zeros(grown.shape, dtype=np.uint8)
        fill_rects(local, (r.expanded(m) for r in poly.rects), p, origin=(c0 * p, r0 * p))
        if (grown & local.astype(bool)).any():
            hits += 1
            if hits >= 2:
                return True
    return False


def markers_from_aerial(clip: LayoutClip, aerial: np.ndarray, mask: np.ndarray,
                        cfg: LithoConfig) -> tuple[np.ndarray, list[ErrorMarker]]:
    printed = aerial >= cfg.threshold
    drawn = mask.astype(bool)
    markers = [m for m, _, _ in _component_markers(drawn & ~printed, cfg.pixel_nm,
                                                   cfg.min_marker_area_nm2, MarkerKind.PINCH)]
    excess = printed & ~drawn
    if excess.any():
        dilated = np.zeros(mask.shape, dtype=np.uint8)
        for poly in clip.polygons:
            fill_rects(dilated, (r.expanded(cfg.dilation_margin_nm) for r in poly.rects), cfg.pixel_nm)
        candidates = _component_markers(printed & ~dilated.astype(bool), cfg.pixel_nm,
                                        cfg.min_marker_area_nm2, MarkerKind.BRIDGE)
        for marker, comp, sl in candidates:
            if _touches_two_polygons(comp, sl, clip, cfg, mask.shape):
                markers.append(marker)
    markers.sort(key=lambda m: (m.kind.value, m.rect.x0, m.rect.y0, m.rect.x1, m.rect.y1))
    return printed, markers


def label_from_markers(markers: Iterable[ErrorMarker], roi: Rect) -> Label:
    """Hotspot iff some marker has at least 30% of its area inside the ROI."""
    for m in markers:
        inter = m.rect.intersection(roi)
        if inter is not None and 100 * inter.area >= 30 * m.area:
            return Label.HOTSPOT
    return Label.NON_HOTSPOT


def simulate(clip: LayoutClip, cfg: LithoConfig | None = None) -> LithoResult:
    cfg = cfg or LithoConfig()
    mask = rasterize(clip, cfg.pixel_nm)
    aerial = aerial_image(clip, cfg.pixel_nm, cfg.sigma_nm, mask)
    printed, markers = markers_from_aerial(clip, aerial, mask, cfg)
    return LithoResult(printed, tuple(markers), label_from_markers(markers, clip.roi))


def label_clip(clip: LayoutClip, cfg: LithoConfig) -> Label:
    return simulate(clip, cfg).label


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Binary 8-bit PGM; nonzero pixels are written as 255, row 0 first."""
    data = np.where(np.asarray(img) > 0, 255, 0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


# -- calibration ------------------------------------------------------------

@dataclass(frozen=True)
class CalibrationTargets:
    prevalence: float = 0.0475
    prevalence_band: tuple[float, float] = (0.03, 0.07)
    cross_class_band: tuple[float, float] = (0.001, 0.01)


@dataclass(frozen=True)
class CalibrationCandidate:
    config: LithoConfig
    prevalence: float
    cross_class_rate: float
    in_bands: bool


def calibrate(corpus: Sequence[LayoutClip],
              variants: Mapping[int, Sequence[LayoutClip]],
              targets: CalibrationTargets | None = None,
              sigmas: Sequence[float] = (25.0,),
              thresholds: Sequence[float] = (0.45,),
              base: LithoConfig | None = None) -> tuple[LithoConfig, list[CalibrationCandidate]]:
    """Grid search over (sigma, threshold).

    ``variants`` maps a corpus index to DRC-clean variants of that clip; only
    variants of parents that are non-hotspot under a candidate count toward its
    cross-class rate. Returns the chosen config and the full candidate table.
    """
    targets = targets or CalibrationTargets()
    base = base or LithoConfig()
    sigmas = sorted(float(s) for s in sigmas)
    thresholds = sorted(float(t) for t in thresholds)
    parent_ids = sorted(variants)
    candidates: list[CalibrationCandidate] = []
    for sigma in sigmas:
        parent_labels = np.zeros((len(corpus), len(thresholds)), dtype=bool)
        for i, clip in enumerate(corpus):
            parent_labels[i] = _labels_over_thresholds(clip, base, sigma, thresholds)
        cross = np.zeros(len(thresholds))
        total = np.zeros(len(thresholds))
        for pid in parent_ids:
            for v in variants[pid]:
                vl = _labels_over_thresholds(v, base, sigma, thresholds)
                nhs_parent = ~parent_labels[pid]
                total += nhs_parent
                cross += nhs_parent & vl
        for t_idx, thr in enumerate(thresholds):
            prev = float(parent_labels[:, t_idx].mean()) if len(corpus) else 0.0
            rate = float(cross[t_idx] / total[t_idx]) if total[t_idx] else 0.0
            lo, hi = targets.cross_class_band
            plo, phi = targets.prevalence_band
            ok = lo <= rate <= hi and plo <= prev <= phi
            cfg = replace(base, sigma_nm=sigma, threshold=thr)
            candidates.append(CalibrationCandidate(cfg, prev, rate, ok))
            logger.debug("calibrate sigma=%.1f thr=%.3f prev=%.4f cross=%.4f", sigma, thr, prev, rate)

    def rank(c: CalibrationCandidate) -> tuple:
        return (abs(c.prevalence - targets.prevalence), c.config.sigma_nm, c.config.threshold)

    valid = [c for c in candidates if c.in_bands]
    if not valid:
        best = min(candidates, key=rank) if candidates else None
        raise CalibrationError(f"no (sigma, threshold) within target bands; best candidate {best}", best,
                               candidates)
    chosen = min(valid, key=rank)
    return chosen.config, candidates


def _labels_over_thresholds(clip: LayoutClip, base: LithoConfig, sigma: float,
                            thresholds: Sequence[float]) -> np.ndarray:
    mask = rasterize(clip, base.pixel_nm)
    aerial = aerial_image(clip, base.pixel_nm, sigma, mask)
    out = np.zeros(len(thresholds), dtype=bool)
    for k, thr in enumerate(thresholds):
        cfg = replace(base, sigma_nm=sigma, threshold=thr)
        _, markers = markers_from_aerial(clip, aerial, mask, cfg)
        out[k] = label_from_markers(markers, clip.roi).is_hotspot
    return out


def grid(start: float, stop: float, step: float) -> list[float]:
    """Inclusive float range rounded to 6 decimals (stable search order)."""
    n = int(round((stop - start) / step))
    return [round(start + i * step, 6) for i in range(n + 1)]


__all__ = [
    "CalibrationCandidate",
    "CalibrationError",
    "CalibrationTargets",
    "ErrorMarker",
    "Label",
    "LithoConfig",
    "LithoResult",
    "MarkerKind",
    "aerial_image",
    "calibrate",
    "grid",
    "label_clip",
    "label_from_markers",
    "markers_from_aerial",
    "simulate",
    "write_pgm",
]
