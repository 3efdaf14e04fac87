import csv

import pytest
import yaml

from conftest import TINY
from hotspot_defense.cli import run
from hotspot_defense.config import load_config


@pytest.fixture(scope="module")
def swept(tmp_path_factory):
    """One tiny sweep shared by the tests that only read its outputs."""
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(dict(TINY, output_dir=str(d / "runs"))))
    assert run(["sweep", "--config", str(cfg), "-q"]) == 0
    return cfg, load_config(cfg).run_dir


def test_bad_arguments_exit_1(capsys):
    assert run([]) == 1
    assert run(["train"]) == 1
    assert run(["gen-corpus", "--count", "x"]) == 1
    assert run(["frobnicate"]) == 1


def test_bad_config_exit_1(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text("levels: [3]\n")
    assert run(["digest", "--config", str(p)]) == 1
    assert "config error" in capsys.readouterr().err


def test_missing_prerequisite_names_earliest_stage(tiny_config, capsys):
    assert run(["train", "--arch", "A", "--config", str(tiny_config)]) == 2
    err = capsys.readouterr().err
    assert "gen-corpus" in err and "corpus.jsonl" in err


def test_digest_and_default_config(tiny_config, capsys):
    assert run(["digest", "--config", str(tiny_config)]) == 0
    dig, rd = capsys.readouterr().out.split()
    cfg = load_config(tiny_config)
    assert dig == cfg.digest and rd == str(cfg.run_dir)
    assert run(["digest", "--config", str(tiny_config), "--seed", "3"]) == 0
    assert capsys.readouterr().out.split()[0] != dig
    assert run(["default-config"]) == 0
    assert "levels" in yaml.safe_load(capsys.readouterr().out)


def test_gen_corpus_is_reproducible(tmp_path):
    outs = []
    for name in ("a", "b"):
        assert run(["gen-corpus", "--seed", "7", "--count", "20", "--test-count", "5",
                    "--output-dir", str(tmp_path / name), "-q"]) == 0
        (d,) = (tmp_path / name).iterdir()
        outs.append(d)
    assert (outs[0] / "corpus.jsonl").read_bytes() == (outs[1] / "corpus.jsonl").read_bytes()
    assert len((outs[0] / "corpus.jsonl").read_text().splitlines()) == 25 + 2  # header and footer


def test_calibration_failure_exit_3(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    doc = dict(TINY, output_dir=str(tmp_path / "runs"))
    doc["calibrate"] = {"sample_count": 10, "variants_per_clip": 1,
                        "targets": {"prevalence_band": [0.99, 1.0]}}
    p.write_text(yaml.safe_dump(doc))
    assert run(["gen-corpus", "--config", str(p), "-q"]) == 0
    assert run(["calibrate", "--config", str(p), "-q"]) == 3
    assert "integrity failure" in capsys.readouterr().err
    assert (load_config(p).run_dir / "calibration.csv").exists()


def test_trigger_in_roi_exit_3(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    doc = dict(TINY, output_dir=str(tmp_path / "runs"), poison={"anchor": [500, 500]})
    doc["corpus"] = {"train_count": 10, "test_count": 5}
    doc["calibrate"] = dict(TINY["calibrate"], sample_count=5, variants_per_clip=1)
    p.write_text(yaml.safe_dump(doc))
    for stage in ("gen-corpus", "calibrate", "simulate"):
        assert run([stage, "--config", str(p), "-q"]) == 0
    assert run(["poison", "--config", str(p), "-q"]) == 3
    assert "trigger rejected" in capsys.readouterr().err


def test_sweep_table(swept, capsys):
    cfg, rd = swept
    rows = list(csv.DictReader(l for l in (rd / "sweep.csv").read_text().splitlines()
                               if not l.startswith("#")))
    assert [int(r["level"]) for r in rows] == [0, 2]
    assert float(rows[0]["A:R-ASR"]) == 1.0
    assert run(["sweep", "--config", str(cfg), "-q"]) == 0
    assert "R-ASR" in capsys.readouterr().out


def test_audit_and_activations(swept, capsys):
    cfg, rd = swept
    assert run(["audit", "--config", str(cfg), "-q"]) == 0
    assert "audit clean" in capsys.readouterr().out
    assert run(["activations", "--config", str(cfg), "--arch", "A", "--level", "clean", "-q"]) == 0
    assert capsys.readouterr().out.strip() == str(rd / "activations" / "A_clean.csv")
    assert run(["activations", "--config", str(cfg), "--arch", "A", "--level", "x"]) == 1
    assert run(["activations", "--config", str(cfg), "--arch", "B", "--level", "0", "-q"]) == 2
