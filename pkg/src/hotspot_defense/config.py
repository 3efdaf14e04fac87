"""Experiment configuration: one YAML file, flag overrides, and a provenance digest."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Union

import yaml

from .attack import PoisonConfig, Trigger, default_trigger, load_trigger
from .drc import RuleDeck
from .geometry import Point
from .litho import CalibrationTargets, LithoConfig
from .nn import ARCHS, TrainConfig
from .synthesis import CorpusParams, GenParams

OUTPUT_ENV = "HOTSPOT_DEFENSE_OUT"
DEFAULT_OUTPUT = "runs"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationSpec:
    """Search grid for the surrogate oracle; a single point makes it a band check."""

    sigmas: tuple[float, ...] = (35.0,)
    thresholds: tuple[float, ...] = (0.34,)
    sample_count: int = 600
    variants_per_clip: int = 10
    targets: CalibrationTargets = field(default_factory=CalibrationTargets)


@dataclass(frozen=True)
class PoisonSpec:
    trigger_gds: str | None = None
    anchor: tuple[int, int] = (150, 760)
    trigger_id: str = "T0"
    target_fraction: float = 1.0


# Defaults for a desk-scale run. Every key may be overridden from YAML.
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "corpus": {"train_count": 2000, "test_count": 8000},
    "drc": {},
    "litho": {"sigma_nm": 35.0, "threshold": 0.34},
    "calibrate": {},
    "gen": {"vary_edge_count": 2, "additional_polygon_count": 2},
    "poison": {},
    "train": {"input_scale": 0.01},
    "archs": ["A"],
    "levels": [0, 3, 12, 50],
    "output_dir": None,
    "jobs": 1,
}

def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    raw: Mapping[str, Any]
    seed: int
    train_count: int
    test_count: int
    corpus: CorpusParams
    deck: RuleDeck
    litho: LithoConfig
    calibration: CalibrationSpec
    gen: GenParams
    poison: PoisonSpec
    train: TrainConfig
    archs: tuple[str, ...]
    levels: tuple[int, ...]
    output_dir: Path
    jobs: int
    base_dir: Path = Path(".")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any] | None = None,
                     base_dir: Union[str, Path] = ".") -> ExperimentConfig:
        unknown = set(data or {}) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        raw = _merge(DEFAULTS, data or {})
        try:
            return cls._build(raw, Path(base_dir))
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def _build(cls, raw: dict, base_dir: Path) -> ExperimentConfig:
        seed = int(raw["seed"])
        corpus = dict(raw["corpus"])
        train_count = int(corpus.pop("train_count"))
        test_count = int(corpus.pop("test_count"))
        if train_count < 1 or test_count < 1:
            raise ConfigError("train_count and test_count must be positive")
        if "clip_count" in corpus or "seed" in corpus:
            raise ConfigError("corpus size and seed come from train_count/test_count and the global seed")
        cp = CorpusParams.from_mapping(dict(corpus, clip_count=train_count + test_count, seed=seed))
        deck = RuleDeck.from_mapping(raw["drc"])
        litho = LithoConfig.from_mapping(raw["litho"])

        cal = dict(raw["calibrate"])
        targets = CalibrationTargets(**{k: tuple(v) if isinstance(v, list) else v
                                        for k, v in dict(cal.pop("targets", {})).items()})
        cal_spec = CalibrationSpec(
            sigmas=tuple(float(s) for s in cal.pop("sigmas", [litho.sigma_nm])),
            thresholds=tuple(float(t) for t in cal.pop("thresholds", [litho.threshold])),
            sample_count=int(cal.pop("sample_count", CalibrationSpec.sample_count)),
            variants_per_clip=int(cal.pop("variants_per_clip", CalibrationSpec.variants_per_clip)),
            targets=targets)
        if cal:
            raise ConfigError(f"unknown calibrate keys: {sorted(cal)}")
        if not cal_spec.sigmas or not cal_spec.thresholds:
            raise ConfigError("calibration grid is empty")

        gen = GenParams.from_mapping(dict(raw["gen"], seed=seed))
        ps = dict(raw["poison"])
        poison = PoisonSpec(
            trigger_gds=ps.pop("trigger_gds", None),
            anchor=tuple(int(v) for v in ps.pop("anchor", PoisonSpec.anchor)),
            trigger_id=str(ps.pop("trigger_id", PoisonSpec.trigger_id)),
            target_fraction=float(ps.pop("target_fraction", PoisonSpec.target_fraction)))
        if ps:
            raise ConfigError(f"unknown poison keys: {sorted(ps)}")
        if len(poison.anchor) != 2:
            raise ConfigError("poison.anchor needs two coordinates")
        if poison.trigger_gds is not None and not (base_dir / poison.trigger_gds).is_file():
            raise ConfigError(f"trigger file {poison.trigger_gds} does not exist")

        train = TrainConfig.from_mapping(dict(raw["train"], seed=raw["train"].get("seed", seed)))
        archs = tuple(str(a) for a in raw["archs"])
        bad = [a for a in archs if a not in ARCHS]
        if bad or not archs:
            raise ConfigError(f"architectures must be drawn from {sorted(ARCHS)}, got {list(archs)}")
        levels = tuple(sorted({int(v) for v in raw["levels"]}))
        if 0 not in levels or levels[0] < 0:
            raise ConfigError("levels must be non-negative and include 0")
        out = raw["output_dir"] or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
        jobs = int(raw["jobs"])
        if jobs < 1:
            raise ConfigError("jobs must be at least 1")
        return cls(raw, seed, train_count, test_count, cp, deck, litho, cal_spec, gen, poison,
                   train, archs, levels, Path(out), jobs, base_dir)

    def with_overrides(self, over: Mapping[str, Any]) -> ExperimentConfig:
        raw = {k: v for k, v in self.raw.items()}
        return ExperimentConfig.from_mapping(_merge(raw, over), self.base_dir)

    # -- provenance -------------------------------------------------------------

    def canonical(self) -> dict:
        """Resolved settings that shape artifacts; equal for configs that spell defaults differently.

        Levels and architectures only choose which artifacts a run builds, so
        they stay out of the digest and one run directory serves every choice.
        """
        cal = asdict(self.calibration)
        trig = asdict(self.poison)
        if self.poison.trigger_gds is not None:
            data = (self.base_dir / self.poison.trigger_gds).read_bytes()
            trig["trigger_gds"] = hashlib.sha256(data).hexdigest()
        return {
            "seed": self.seed,
            "train_count": self.train_count,
            "test_count": self.test_count,
            "corpus": asdict(self.corpus),
            "drc": asdict(self.deck),
            "litho": self.litho.as_dict(),
            "calibrate": cal,
            "gen": asdict(self.gen),
            "poison": trig,
            "train": asdict(self.train),
        }

    @property
    def digest(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    @property
    def run_dir(self) -> Path:
        return self.output_dir / self.digest[:16]

    # -- derived objects -----------------------------------------------------------

    def trigger(self) -> Trigger:
        p = self.poison
        if p.trigger_gds is None:
            t = default_trigger()
            return replace(t, trigger_id=p.trigger_id, anchor=Point(*p.anchor))
        return load_trigger(self.base_dir / p.trigger_gds, p.anchor, p.trigger_id)

    def poison_config(self) -> PoisonConfig:
        return PoisonConfig(self.trigger(), self.poison.target_fraction, self.seed)

    def gen_at(self, level: int) -> GenParams:
        return replace(self.gen, variant_count=level)


def load_config(path: Union[str, Path, None] = None,
                overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Config from a YAML file (or defaults), then ``overrides`` on top."""
    data: dict = {}
    base = Path(".")
    if path is not None:
        p = Path(path)
        try:
            data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML in {p}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        base = p.parent
    if overrides:
        data = _merge(data, overrides)
    return ExperimentConfig.from_mapping(data, base)


def default_yaml() -> str:
    doc = {k: v for k, v in DEFAULTS.items() if k != "output_dir"}
    doc["corpus"] = dict(DEFAULTS["corpus"], **{f.name: f.default for f in fields(CorpusParams)
                                               if f.name not in ("clip_count", "seed")})
    doc["drc"] = {f.name: f.default for f in fields(RuleDeck)}
    doc["litho"] = dict(LithoConfig().as_dict(), **DEFAULTS["litho"])
    doc["gen"] = {f.name: f.default for f in fields(GenParams) if f.name not in ("variant_count", "seed")}
    doc["poison"] = {"trigger_gds": None, "anchor": list(PoisonSpec.anchor),
                     "trigger_id": PoisonSpec.trigger_id, "target_fraction": 1.0}
    doc["train"] = {f.name: f.default for f in fields(TrainConfig) if f.name != "seed"}
    doc["train"].update(DEFAULTS["train"])
    return yaml.safe_dump(doc, sort_keys=False)
