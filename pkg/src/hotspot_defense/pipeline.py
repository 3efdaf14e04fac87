"""End-to-end experiment stages over one run directory named by the config digest.

Layout under ``<output_dir>/<digest[:16]>/``::

    config.json                  resolved settings plus the full digest
    clips/<clip_id>.gds          every clip the run creates
    corpus.jsonl                 generated clips, unlabeled
    calibration.json             chosen oracle settings
    calibration.csv              every candidate of the search
    labeled.jsonl                corpus with oracle labels
    poison.jsonl, poison.csv     poisoned train/test clips and insertion stats
    augment.jsonl, augment.csv   retained variants up to the top level, yield per parent
    features/<set>.hsft          feature caches in manifest order
    models/<arch>_<tag>.hsdm     selected model per training set
    logs/<arch>_<tag>.csv        per-epoch training log
    eval.csv, sweep.csv, sweep.txt
    activations/<arch>_<tag>.csv
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import ExperimentConfig
from .drc import check_clip
from .eval import SLICES, EvalReport, evaluate, export_activations, sweep_report, text_table
from .features import featurize, feature_cache_bytes, parse_feature_cache_with_digest
from .geometry import LayoutClip
from .layout_io import (
    ClipRecord,
    DatasetManifest,
    Sample,
    Split,
    clip_gds_bytes,
    clip_path,
    manifest_text,
    parse_clip_gds,
    parse_manifest,
)
from .litho import CalibrationError, Label, LithoConfig, calibrate, simulate
from .nn import Model, load_model, model_bytes, select_model, train
from .parallel import parallel_map
from .synthesis import VariantSet, corpus_clip_id, defensive_augment, gen_variants, generate_clip
from .seeding import derive_seed, rng_for

logger = logging.getLogger(__name__)

# stage order with the artifact that marks each stage as done
CHAIN = (
    ("gen-corpus", "corpus.jsonl"),
    ("calibrate", "calibration.json"),
    ("simulate", "labeled.jsonl"),
    ("poison", "poison.jsonl"),
    ("augment", "augment.jsonl"),
    ("featurize", "features/augment.hsft"),
    ("train", None),
)
STAGES = tuple(s for s, _ in CHAIN) + ("evaluate",)


class DependencyError(RuntimeError):
    """A prerequisite artifact is missing; ``stage`` names the subcommand that makes it."""

    def __init__(self, stage: str, path: Path):
        super().__init__(f"{path} is missing; run `{stage}` first")
        self.stage = stage
        self.path = path


class IntegrityError(RuntimeError):
    pass


def _write(path: Path, data: bytes | str) -> None:
    """Write via a temporary sibling so readers never see a partial file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        data = data.encode("utf-8")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _label_task(args):
    clip, cfg = args
    return simulate(clip, cfg).label


def _feature_task(clips):
    return featurize(clips)


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, log: Callable[[str], None] | None = None):
        self.cfg = cfg
        self.digest = cfg.digest
        self.root = cfg.run_dir
        self.log = log or logger.info
        self._clips: dict[str, LayoutClip] = {}

    # -- paths and artifact helpers -------------------------------------------------

    def path(self, name: str) -> Path:
        return self.root / name

    def _need(self, name: str, stage: str) -> Path:
        p = self.path(name)
        if not p.exists():
            # name the earliest stage that has not run, not just the nearest one
            for st, art in CHAIN:
                if st == stage or art is None:
                    break
                if not self.path(art).exists():
                    raise DependencyError(st, self.path(art))
            raise DependencyError(stage, p)
        return p

    def _save_manifest(self, name: str, records: Sequence[ClipRecord]) -> None:
        m = DatasetManifest(self.cfg.seed, self.digest, list(records))
        _write(self.path(name), manifest_text(m))

    def _load_manifest(self, name: str, stage: str) -> DatasetManifest:
        m = parse_manifest(self._need(name, stage).read_text(encoding="utf-8"))
        if m.config_digest != self.digest:
            raise IntegrityError(f"{name} was written under digest {m.config_digest[:16]}")
        return m

    def _save_clips(self, clips: Iterable[LayoutClip]) -> None:
        lib = f"HS{self.digest[:16]}"
        for c in clips:
            _write(self.root / clip_path(c.id), clip_gds_bytes(c, lib))
            self._clips[c.id] = c

    def clip(self, rec: ClipRecord) -> LayoutClip:
        c = self._clips.get(rec.clip_id)
        if c is None:
            p = self.root / rec.path
            if not p.exists():
                raise IntegrityError(f"clip file {p} is missing")
            c = parse_clip_gds(p.read_bytes(), rec.clip_id)
            self._clips[rec.clip_id] = c
        return c

    def samples(self, records: Iterable[ClipRecord]) -> list[Sample]:
        return [Sample(r, self.clip(r)) for r in records]

    def _csv(self, header: Sequence[str], rows: Iterable[Sequence]) -> str:
        buf = io.StringIO()
        buf.write(f"# config_digest={self.digest}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()

    def _with_digest(self, text: str) -> str:
        return text if text.startswith("# config_digest=") else f"# config_digest={self.digest}\n{text}"

    # -- stages -------------------------------------------------------------------------

    def write_config(self) -> None:
        doc = {"config_digest": self.digest, "settings": self.cfg.canonical()}
        _write(self.path("config.json"), json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def gen_corpus(self) -> DatasetManifest:
        cfg = self.cfg
        self.write_config()
        params = cfg.corpus
        ids = [corpus_clip_id(i) for i in range(params.clip_count)]
        clips = parallel_map(_gen_task, [(cid, i, params, cfg.deck) for i, cid in enumerate(ids)],
                             cfg.jobs)
        self._save_clips(clips)
        records = [ClipRecord(c.id, clip_path(c.id), None,
                              Split.TRAIN if i < cfg.train_count else Split.TEST,
                              rng_seed=derive_seed(params.seed, "corpus", i))
                   for i, c in enumerate(clips)]
        self._save_manifest("corpus.jsonl", records)
        self.log(f"gen-corpus: {len(records)} clips ({cfg.train_count} train)")
        return DatasetManifest(cfg.seed, self.digest, records)

    def calibrate(self) -> LithoConfig:
        """Search the configured (sigma, threshold) grid on a train-split sample.

        Always writes the candidate table; raises CalibrationError when no
        candidate lies inside both target bands.
        """
        cfg, spec = self.cfg, self.cfg.calibration
        m = self._load_manifest("corpus.jsonl", "gen-corpus")
        pool = [r for r in m.records if r.split is Split.TRAIN][:spec.sample_count]
        corpus = [self.clip(r) for r in pool]
        gp = replace(cfg.gen, variant_count=spec.variants_per_clip)
        sets = parallel_map(_variant_task, [(c, gp, cfg.deck) for c in corpus], cfg.jobs)
        variants = {i: [v.clip for v in vs] for i, vs in enumerate(sets)}
        err = None
        try:
            chosen, cands = calibrate(corpus, variants, spec.targets, spec.sigmas, spec.thresholds,
                                      base=cfg.litho)
        except CalibrationError as exc:
            err, chosen, cands = exc, None, exc.candidates
        rows = [(c.config.sigma_nm, c.config.threshold, f"{c.prevalence:.6f}",
                 f"{c.cross_class_rate:.6f}", int(c.in_bands)) for c in cands]
        _write(self.path("calibration.csv"),
               self._csv(["sigma_nm", "threshold", "prevalence", "cross_class_rate", "in_bands"], rows))
        if err is not None:
            raise err
        doc = {"config_digest": self.digest, "litho": chosen.as_dict()}
        _write(self.path("calibration.json"), json.dumps(doc, indent=2, sort_keys=True) + "\n")
        self.log(f"calibrate: sigma={chosen.sigma_nm} threshold={chosen.threshold}")
        return chosen

    def oracle(self) -> LithoConfig:
        doc = json.loads(self._need("calibration.json", "calibrate").read_text(encoding="utf-8"))
        if doc.get("config_digest") != self.digest:
            raise IntegrityError("calibration.json belongs to another configuration")
        return LithoConfig.from_mapping(doc["litho"])

    def simulate(self) -> DatasetManifest:
        m = self._load_manifest("corpus.jsonl", "gen-corpus")
        oracle = self.oracle()
        labels = parallel_map(_label_task, [(self.clip(r), oracle) for r in m.records], self.cfg.jobs)
        records = [replace(r, label=l) for r, l in zip(m.records, labels)]
        self._save_manifest("labeled.jsonl", records)
        hs = sum(1 for r in records if r.label is Label.HOTSPOT and r.split is Split.TRAIN)
        self.log(f"simulate: {hs}/{self.cfg.train_count} train hotspots")
        return DatasetManifest(self.cfg.seed, self.digest, records)

    def poison(self):
        from .attack import TriggerError, poison_dataset

        cfg = self.cfg
        m = self._load_manifest("labeled.jsonl", "simulate")
        oracle = self.oracle()
        pc = cfg.poison_config()
        sample_clip = self.clip(m.records[0]) if m.records else None
        if sample_clip is not None:
            try:
                pc.trigger.check(cfg.deck, oracle, sample_clip.roi, sample_clip.bounds)
            except TriggerError as exc:
                raise IntegrityError(f"trigger rejected: {exc}") from exc
        out = poison_dataset(self.samples(m.records), pc, oracle, cfg.deck)
        made = out.train + out.test_nhs + out.test_hs + out.test_flipped
        self._save_clips(s.clip for s in made)
        # manifest order: train, then test in corpus order
        order = {r.clip_id: i for i, r in enumerate(m.records)}
        test = sorted(out.test_nhs + out.test_hs + out.test_flipped,
                      key=lambda s: order[s.record.provenance.parent_id])
        self._save_manifest("poison.jsonl", [s.record for s in out.train + test])
        _write(self.path("poison.csv"), out.stats_csv(self.digest))
        self.log(f"poison: {len(out.train)} train, {len(out.test_nhs)} test NH, "
                 f"{len(out.test_hs)} test HS, {len(out.test_flipped)} flipped")
        return out

    def augment(self, levels: Sequence[int] | None = None):
        cfg = self.cfg
        top = max(levels if levels else cfg.levels)
        base = self.train_records()
        oracle = self.oracle()
        res = defensive_augment(self.samples(base), cfg.gen_at(top), oracle, cfg.deck, cfg.jobs)
        self._save_clips(s.clip for s in res.samples)
        self._save_manifest("augment.jsonl", [s.record for s in res.samples])
        _write(self.path("augment.csv"), res.yield_csv(self.digest))
        meta = {"config_digest": self.digest, "top_level": top,
                "cross_class_rate": res.cross_class_rate()}
        _write(self.path("augment.json"), json.dumps(meta, indent=2, sort_keys=True) + "\n")
        self.log(f"augment: level {top}, {len(res.samples)} retained, "
                 f"cross-class rate {res.cross_class_rate():.4%}")
        return res

    # -- record sets -------------------------------------------------------------------

    def train_records(self) -> list[ClipRecord]:
        """Clean and poisoned training clips, in manifest order."""
        lab = self._load_manifest("labeled.jsonl", "simulate")
        poi = self._load_manifest("poison.jsonl", "poison")
        return ([r for r in lab.records if r.split is Split.TRAIN]
                + [r for r in poi.records if r.split is Split.TRAIN])

    def record_sets(self) -> dict[str, list[ClipRecord]]:
        lab = self._load_manifest("labeled.jsonl", "simulate")
        poi = self._load_manifest("poison.jsonl", "poison")
        aug = self._load_manifest("augment.jsonl", "augment")
        parent = {r.clip_id: r.label for r in lab.records}
        test_p = [r for r in poi.records if r.split is Split.TEST
                  and r.label == parent[r.provenance.parent_id]]
        tr = [r for r in lab.records if r.split is Split.TRAIN]
        te = [r for r in lab.records if r.split is Split.TEST]
        return {
            "train-clean": tr,
            "train-poisoned": [r for r in poi.records if r.split is Split.TRAIN],
            "augment": aug.records,
            "clean-NH": [r for r in te if r.label is Label.NON_HOTSPOT],
            "clean-HS": [r for r in te if r.label is Label.HOTSPOT],
            "poisoned-NH": [r for r in test_p if r.label is Label.NON_HOTSPOT],
            "poisoned-HS": [r for r in test_p if r.label is Label.HOTSPOT],
        }

    def featurize(self) -> dict[str, int]:
        counts = {}
        for name, recs in self.record_sets().items():
            clips = [self.clip(r) for r in recs]
            chunks = [clips[i:i + 256] for i in range(0, len(clips), 256)]
            parts = parallel_map(_feature_task, chunks, self.cfg.jobs)
            feats = np.concatenate(parts) if parts else featurize([])
            _write(self.path(f"features/{name}.hsft"), feature_cache_bytes(feats, self.digest))
            counts[name] = len(feats)
        self.log("featurize: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
        return counts

    def features(self, name: str) -> np.ndarray:
        data = self._need(f"features/{name}.hsft", "featurize").read_bytes()
        arr, dig = parse_feature_cache_with_digest(data)
        if dig != self.digest:
            raise IntegrityError(f"feature cache {name} carries digest {dig[:16]}")
        return arr

    def training_set(self, level: int | None) -> tuple[np.ndarray, np.ndarray]:
        """``None`` is the clean baseline; an integer is a poisoned set augmented to that level."""
        sets = self.record_sets()

        def lab(recs):
            return np.array([r.label is Label.HOTSPOT for r in recs], dtype=np.int64)

        x, y = [self.features("train-clean")], [lab(sets["train-clean"])]
        if level is not None:
            x.append(self.features("train-poisoned"))
            y.append(lab(sets["train-poisoned"]))
            if level > 0:
                aug = sets["augment"]
                keep = np.array([r.provenance.variant_index < level for r in aug], dtype=bool)
                top = json.loads(self._need("augment.json", "augment").read_text())["top_level"]
                if level > top:
                    raise DependencyError("augment", self.path("augment.jsonl"))
                if keep.any():
                    x.append(self.features("augment")[keep])
                    y.append(lab(aug)[keep])
        return np.concatenate(x), np.concatenate(y)

    # -- models -------------------------------------------------------------------------

    @staticmethod
    def tag(level: int | None) -> str:
        return "clean" if level is None else f"L{level}"

    def model_tags(self) -> list[int | None]:
        return [None] + list(self.cfg.levels)

    def train(self, arch: str, levels: Sequence[int | None] | None = None) -> dict:
        chosen = {}
        for level in (self.model_tags() if levels is None else levels):
            x, y = self.training_set(level)
            res = train(arch, x, y, self.cfg.train)
            sel = select_model(res.checkpoints)
            model = res.model_at(sel.chosen)
            model.config_digest = self.digest
            tag = self.tag(level)
            _write(self.path(f"models/{arch}_{tag}.hsdm"), model_bytes(model))
            log = res.log_csv(self.digest)
            log += f"# selected_epoch={sel.chosen.epoch} degraded={int(sel.degraded)}\n"
            _write(self.path(f"logs/{arch}_{tag}.csv"), log)
            chosen[tag] = (sel.chosen.epoch, sel.degraded)
            self.log(f"train {arch} {tag}: {len(y)} clips, {int(y.sum())} hotspots, "
                     f"epoch {sel.chosen.epoch}{' (degraded)' if sel.degraded else ''}")
        return chosen

    def model(self, arch: str, level: int | None) -> Model:
        m = load_model(self._need(f"models/{arch}_{self.tag(level)}.hsdm", "train"))
        if m.config_digest != self.digest:
            raise IntegrityError(f"model {arch}_{self.tag(level)} belongs to another configuration")
        return m

    def evaluate(self) -> list[EvalReport]:
        slices = {s: self.features(s) for s in SLICES}
        reports = []
        for arch in self.cfg.archs:
            base = None
            for level in self.model_tags():
                rep = evaluate(self.model(arch, level), slices, f"{arch}_{self.tag(level)}",
                               -1 if level is None else level, base)
                if level == 0:
                    base = rep.asr
                    if rep.asr:
                        rep.r_asr = 1.0
                reports.append(rep)
        _write(self.path("eval.csv"), self._csv(_EVAL_HEADER, [_eval_row(r) for r in reports]))
        return reports

    def sweep_tables(self, reports: Sequence[EvalReport]) -> tuple[str, list[dict]]:
        poisoned = [r for r in reports if r.level >= 0]
        text, rows = sweep_report(poisoned, arch_of=lambda r: r.model_id.split("_")[0],
                                  digest=self.digest)
        _write(self.path("sweep.csv"), text)
        _write(self.path("sweep.txt"), self._with_digest(text_table(rows)))
        return text, rows

    def sweep(self, force: bool = False) -> list[dict]:
        """Every stage in order; stages whose outputs exist are reused unless ``force``."""
        steps = [
            ("corpus.jsonl", self.gen_corpus),
            ("calibration.json", self.calibrate),
            ("labeled.jsonl", self.simulate),
            ("poison.jsonl", self.poison),
            ("augment.jsonl", lambda: self.augment(self.cfg.levels)),
            ("features/augment.hsft", self.featurize),
        ]
        for artifact, fn in steps:
            if force or not self.path(artifact).exists():
                fn()
        for arch in self.cfg.archs:
            missing = [lv for lv in self.model_tags()
                       if force or not self.path(f"models/{arch}_{self.tag(lv)}.hsdm").exists()]
            if missing:
                self.train(arch, missing)
        _, rows = self.sweep_tables(self.evaluate())
        return rows

    def activations(self, arch: str, level: int | None, layer: str = "fc1") -> Path:
        sets = self.record_sets()
        ids, tags, feats = [], [], []
        for s in SLICES:
            ids += [r.clip_id for r in sets[s]]
            tags += [s] * len(sets[s])
            feats.append(self.features(s))
        text = export_activations(self.model(arch, level), np.concatenate(feats), ids, tags,
                                  layer, self.digest)
        out = self.path(f"activations/{arch}_{self.tag(level)}.csv")
        _write(out, text)
        return out

    # -- audits ---------------------------------------------------------------------------

    def audit(self) -> list[str]:
        """Clean-label audit of every poisoned and augmented record: DRC plus fresh labels."""
        oracle = self.oracle()
        problems = []
        recs = (self._load_manifest("poison.jsonl", "poison").records
                + self._load_manifest("augment.jsonl", "augment").records)
        for r in recs:
            clip = self.clip(r)
            if check_clip(clip, self.cfg.deck):
                problems.append(f"{r.clip_id}: DRC violation")
            if simulate(clip, oracle).label != r.label:
                problems.append(f"{r.clip_id}: stored label {r.label} disagrees with simulation")
        return problems


_EVAL_HEADER = (["model", "level"] + [f"{s}:{k}" for s in SLICES for k in ("pred_nh", "pred_hs")]
                + [f"acc:{s}" for s in SLICES] + ["clean_acc", "asr", "r_asr", "flags"])


def _fmt(v) -> str:
    return "" if v is None or v != v else f"{v:.6f}"


def _eval_row(r: EvalReport) -> list:
    row = [r.model_id, r.level]
    for s in SLICES:
        m = r.matrices.get(s)
        row += list(m.counts[0 if s.endswith("NH") else 1]) if m else ["", ""]
    row += [_fmt(r.slice_accuracy(s)) for s in SLICES]
    row += [_fmt(r.clean_accuracy()), _fmt(r.asr), _fmt(r.r_asr), ";".join(r.flags)]
    return row


def read_eval(path: Path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _gen_task(args):
    cid, i, params, deck = args
    return generate_clip(cid, rng_for(params.seed, "corpus", i), params, deck)


def _variant_task(args):
    clip, gp, deck = args
    if not clip.polygons:
        return VariantSet(clip.id, [], 0, 0)
    return gen_variants(clip, gp, deck)
