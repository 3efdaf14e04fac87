"""Four-slice confusion matrices, attack success rates, sweep tables and activation export."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .nn import Model, ShapeError

SLICES = ("clean-NH", "clean-HS", "poisoned-NH", "poisoned-HS")
_TRUE = {"clean-NH": 0, "clean-HS": 1, "poisoned-NH": 0, "poisoned-HS": 1}
_SHORT = {"clean-NH": "C-NH", "clean-HS": "C-HS", "poisoned-NH": "P-NH", "poisoned-HS": "P-HS"}


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[t][p]: samples of true class t predicted as p (0 = NonHotspot, 1 = Hotspot)."""

    counts: tuple[tuple[int, int], tuple[int, int]]

    @classmethod
    def from_predictions(cls, y_true: np.ndarray, y_pred: np.ndarray) -> ConfusionMatrix:
        c = [[0, 0], [0, 0]]
        for t, p in zip(np.asarray(y_true).tolist(), np.asarray(y_pred).tolist()):
            c[int(t)][int(p)] += 1
        return cls((tuple(c[0]), tuple(c[1])))

    def fractions(self) -> tuple[tuple[float, float], tuple[float, float]]:
        rows = []
        for r in self.counts:
            n = sum(r)
            rows.append((r[0] / n, r[1] / n) if n else (float("nan"), float("nan")))
        return tuple(rows)

    def accuracy(self, true_class: int) -> float:
        """Fraction of samples of ``true_class`` predicted correctly."""
        return self.fractions()[true_class][true_class]

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))


@dataclass
class EvalReport:
    model_id: str
    level: int
    matrices: dict[str, ConfusionMatrix]
    asr: float | None
    r_asr: float | None = None
    flags: list[str] = field(default_factory=list)

    def slice_accuracy(self, name: str) -> float:
        m = self.matrices.get(name)
        return float("nan") if m is None or m.total == 0 else m.accuracy(_TRUE[name])

    def clean_accuracy(self) -> float:
        """Overall accuracy on the union of the two clean slices."""
        nh, hs = self.matrices["clean-NH"], self.matrices["clean-HS"]
        right = nh.counts[0][0] + hs.counts[1][1]
        return right / (nh.total + hs.total)


def relative_asr(asr: float, baseline_asr: float) -> float:
    if baseline_asr <= 0:
        raise EvaluationError("R-ASR is undefined for a zero baseline ASR")
    return asr / baseline_asr


def evaluate(model: Model, slices: Mapping[str, np.ndarray], model_id: str = "",
             level: int = 0, baseline_asr: float | None = None) -> EvalReport:
    """Classify each slice by argmax (ties to Hotspot) and tabulate.

    ``slices`` maps slice names from SLICES to feature stacks; every sample
    of a slice shares the slice's true class.
    """
    unknown = set(slices) - set(SLICES)
    if unknown:
        raise EvaluationError(f"unknown slices {sorted(unknown)}")
    for name in ("clean-NH", "clean-HS"):
        if name not in slices or len(slices[name]) == 0:
            raise EvaluationError(f"slice {name} is empty")
    mats = {}
    for name in SLICES:
        x = slices.get(name)
        if x is None:
            continue
        pred = model.predict(x) if len(x) else np.zeros(0, np.int64)
        mats[name] = ConfusionMatrix.from_predictions(np.full(len(x), _TRUE[name]), pred)
    rep = EvalReport(model_id, level, mats, None)
    phs = mats.get("poisoned-HS")
    if phs is None or phs.total == 0:
        rep.flags.append("empty poisoned-HS slice")
    else:
        rep.asr = phs.fractions()[1][0]
        if baseline_asr is not None and baseline_asr > 0:
            rep.r_asr = relative_asr(rep.asr, baseline_asr)
    return rep


def _fmt(v: float | None) -> str:
    return "" if v is None or v != v else f"{v:.4f}"


def _with_digest(digest: str) -> io.StringIO:
    buf = io.StringIO()
    if digest:
        buf.write(f"# config_digest={digest}\n")
    return buf


def export_activations(model: Model, features: np.ndarray, clip_ids: Sequence[str],
                       tags: Sequence[str], layer: str = "fc1", digest: str = "",
                       batch: int = 512) -> str:
    """CSV of (clip_id, slice, activation values) for one named layer, rows in input order."""
    if layer not in model.named:
        raise ShapeError(f"unknown layer {layer!r}")
    if not len(features) == len(clip_ids) == len(tags):
        raise EvaluationError("features, clip ids and tags differ in length")
    buf = _with_digest(digest)
    w = csv.writer(buf, lineterminator="\n")
    rows = []
    for i in range(0, len(features), batch):
        _, acts = model.forward(features[i:i + batch], capture=[layer])
        rows.append(acts[layer].reshape(len(acts[layer]), -1))
    width = int(np.prod(model.layer_shape(layer)))
    w.writerow(["clip_id", "slice"] + [f"a{j}" for j in range(width)])
    if rows:
        acts = np.concatenate(rows)
        for cid, tag, a in zip(clip_ids, tags, acts):
            w.writerow([cid, tag] + [format(float(v), ".9g") for v in a])
    return buf.getvalue()


def sweep_report(reports: Sequence[EvalReport], arch_of=lambda r: r.model_id,
                 digest: str = "") -> tuple[str, list[dict]]:
    """Table-style CSV: one row per augmentation level, six columns per architecture.

    R-ASR is recomputed against each architecture's level-0 ASR.
    """
    archs = sorted({arch_of(r) for r in reports})
    by = {(arch_of(r), r.level): r for r in reports}
    levels = sorted({r.level for r in reports})
    rows = []
    for a in archs:
        base = by.get((a, 0))
        if base is None:
            raise EvaluationError(f"no level-0 baseline for architecture {a}")
    for lv in levels:
        row: dict = {"level": lv}
        for a in archs:
            r = by.get((a, lv))
            base = by[(a, 0)]
            for s in SLICES:
                row[f"{a}:{_SHORT[s]}"] = None if r is None else r.slice_accuracy(s)
            row[f"{a}:ASR"] = None if r is None else r.asr
            rasr = None
            if r is not None and r.asr is not None and base.asr:
                rasr = relative_asr(r.asr, base.asr)
            row[f"{a}:R-ASR"] = rasr
        rows.append(row)
    buf = _with_digest(digest)
    w = csv.writer(buf, lineterminator="\n")
    cols = ["level"] + [f"{a}:{c}" for a in archs
                        for c in ("C-NH", "C-HS", "P-NH", "P-HS", "ASR", "R-ASR")]
    w.writerow(cols)
    for row in rows:
        w.writerow([row["level"]] + [_fmt(row[c]) for c in cols[1:]])
    return buf.getvalue(), rows


def text_table(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[str(c) for c in cols]]
    for r in rows:
        cells.append([str(r[c]) if c == "level" else (_fmt(r[c]) or "-") for c in cols])
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells) + "\n"
