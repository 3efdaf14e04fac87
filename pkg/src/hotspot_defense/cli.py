"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 missing prerequisite
artifact, 3 integrity or calibration failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Sequence

from .config import ConfigError, default_yaml, load_config
from .litho import CalibrationError
from .pipeline import DependencyError, IntegrityError, Pipeline

EXIT_OK, EXIT_USAGE, EXIT_DEPENDENCY, EXIT_INTEGRITY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


def _levels(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from exc


def _level_tag(text: str):
    if text == "clean":
        return None
    try:
        return int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError("level is an integer or 'clean'") from exc


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--output-dir", help="root for run directories (default $HOTSPOT_DEFENSE_OUT or ./runs)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("-q", "--quiet", action="store_true")

    p = _Parser(prog="hotspot-defense", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", parents=[common], help="generate the base corpus")
    g.add_argument("--count", type=int, help="training clip count")
    g.add_argument("--test-count", type=int, help="test clip count")
    sub.add_parser("calibrate", parents=[common], help="pick oracle settings inside the target bands")
    sub.add_parser("simulate", parents=[common], help="label the corpus with the oracle")
    sub.add_parser("poison", parents=[common], help="insert the trigger into train and test clips")
    a = sub.add_parser("augment", parents=[common], help="defensive augmentation up to the top level")
    a.add_argument("--levels", type=_levels)
    sub.add_parser("featurize", parents=[common], help="write feature caches")
    t = sub.add_parser("train", parents=[common], help="train the clean baseline and one model per level")
    t.add_argument("--arch", choices=("A", "B"), required=True)
    t.add_argument("--levels", type=_levels)
    e = sub.add_parser("evaluate", parents=[common], help="four-slice reports for every trained model")
    e.add_argument("--arch", choices=("A", "B"), action="append")
    e.add_argument("--levels", type=_levels)
    s = sub.add_parser("sweep", parents=[common], help="run every missing stage and write the level table")
    s.add_argument("--levels", type=_levels)
    s.add_argument("--arch", choices=("A", "B"), action="append")
    s.add_argument("--force", action="store_true", help="recompute stages whose outputs exist")
    x = sub.add_parser("activations", parents=[common], help="export first dense layer activations")
    x.add_argument("--arch", choices=("A", "B"), required=True)
    x.add_argument("--level", type=_level_tag, required=True, help="augmentation level or 'clean'")
    x.add_argument("--layer", default="fc1")
    sub.add_parser("audit", parents=[common], help="DRC and label re-check of poisoned and augmented clips")
    sub.add_parser("digest", parents=[common], help="print the config digest and run directory")
    sub.add_parser("default-config", help="print the default YAML config")
    return p


def _overrides(args) -> dict:
    over: dict = {}
    if args.output_dir is not None:
        over["output_dir"] = args.output_dir
    if args.seed is not None:
        over["seed"] = args.seed
    if args.jobs is not None:
        over["jobs"] = args.jobs
    if getattr(args, "count", None) is not None:
        over.setdefault("corpus", {})["train_count"] = args.count
    if getattr(args, "test_count", None) is not None:
        over.setdefault("corpus", {})["test_count"] = args.test_count
    if getattr(args, "levels", None):
        over["levels"] = args.levels
    arch = getattr(args, "arch", None)
    if arch:
        over["archs"] = [arch] if isinstance(arch, str) else arch
    return over


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if args.command == "default-config":
        sys.stdout.write(default_yaml())
        return EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, _overrides(args))
        pipe = Pipeline(cfg)
        cmd = args.command
        if cmd == "digest":
            print(cfg.digest)
            print(cfg.run_dir)
        elif cmd == "gen-corpus":
            pipe.gen_corpus()
        elif cmd == "calibrate":
            pipe.calibrate()
        elif cmd == "simulate":
            pipe.simulate()
        elif cmd == "poison":
            pipe.poison()
        elif cmd == "augment":
            pipe.augment(cfg.levels)
        elif cmd == "featurize":
            pipe.featurize()
        elif cmd == "train":
            pipe.train(args.arch)
        elif cmd == "evaluate":
            pipe.evaluate()
        elif cmd == "sweep":
            pipe.sweep(force=args.force)
            sys.stdout.write(pipe.path("sweep.txt").read_text(encoding="utf-8"))
        elif cmd == "activations":
            print(pipe.activations(args.arch, args.level, args.layer))
        elif cmd == "audit":
            problems = pipe.audit()
            for line in problems:
                print(line)
            if problems:
                return EXIT_INTEGRITY
            print("audit clean")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DependencyError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (IntegrityError, CalibrationError) as exc:
        print(f"integrity failure: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
