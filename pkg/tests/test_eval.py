import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hotspot_defense.eval import (
    SLICES,
    ConfusionMatrix,
    EvalReport,
    EvaluationError,
    evaluate,
    export_activations,
    relative_asr,
    sweep_report,
    text_table,
)
from hotspot_defense.nn import ArchSpec, Model, ShapeError, build_model


def sign_model():
    """Predicts Hotspot for x >= 0 and NonHotspot for x < 0."""
    m = Model(ArchSpec("sign", (("flatten",), ("dense", 2, "softmax")), (1, 1, 1)), dtype=np.float64)
    m.param_layers()[0].params = {"W": np.array([[-1.0, 1.0]]), "b": np.zeros(2)}
    return m


def feats(*vals):
    return np.array(vals, dtype=float).reshape(-1, 1, 1, 1)


def slices(phs=(-1, -1, 1, 1)):
    return {"clean-NH": feats(-1, -2, 3), "clean-HS": feats(1, 2), "poisoned-NH": feats(-1),
            "poisoned-HS": feats(*phs)}


def test_all_poisoned_hotspots_missed():
    r = evaluate(sign_model(), slices(phs=(-1, -2, -3)))
    assert r.asr == 1.0 and r.slice_accuracy("poisoned-HS") == 0.0


def test_report_matrices():
    r = evaluate(sign_model(), slices(), "m", level=3, baseline_asr=0.8)
    assert r.matrices["clean-NH"].counts == ((2, 1), (0, 0))
    assert r.slice_accuracy("clean-NH") == pytest.approx(2 / 3)
    assert r.asr == 0.5 and r.r_asr == pytest.approx(0.625)
    assert r.clean_accuracy() == pytest.approx(4 / 5)


def test_tie_goes_to_hotspot():
    r = evaluate(sign_model(), {"clean-NH": feats(0.0), "clean-HS": feats(0.0)})
    assert r.slice_accuracy("clean-HS") == 1.0 and r.slice_accuracy("clean-NH") == 0.0
    assert r.asr is None and "empty poisoned-HS slice" in r.flags


def test_empty_clean_slice_rejected():
    with pytest.raises(EvaluationError):
        evaluate(sign_model(), {"clean-NH": feats(1), "clean-HS": feats()})
    with pytest.raises(EvaluationError):
        evaluate(sign_model(), {"clean-NH": feats(1), "clean-HS": feats(1), "other": feats(1)})


def test_relative_asr_examples():
    assert round(relative_asr(0.68, 0.81), 2) == 0.84
    assert relative_asr(0.5, 0.5) == 1.0
    assert relative_asr(0.0, 0.7) == 0.0
    with pytest.raises(EvaluationError):
        relative_asr(0.3, 0.0)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_confusion_invariants(pairs):
    t, p = np.array(pairs).T
    m = ConfusionMatrix.from_predictions(t, p)
    assert m.total == len(pairs)
    for row, counts in zip(m.fractions(), m.counts):
        if sum(counts):
            assert abs(sum(row) - 1) < 1e-9
            assert all(abs(f - c / sum(counts)) < 1e-9 for f, c in zip(row, counts))


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=20))
@settings(max_examples=30)
def test_asr_plus_accuracy_is_one(vals):
    r = evaluate(sign_model(), slices(phs=vals))
    assert r.asr + r.slice_accuracy("poisoned-HS") == 1.0


# -- activations ---------------------------------------------------------------------

def test_activation_export_shape_and_determinism():
    m = build_model("A", 2)
    x = np.random.default_rng(1).normal(size=(5, 10, 10, 32)).astype(np.float32)
    ids = [f"c{i}" for i in range(5)]
    a = export_activations(m, x, ids, ["clean-NH"] * 5, digest="d")
    assert a == export_activations(m, x, ids, ["clean-NH"] * 5, digest="d")
    rows = list(csv.reader(io.StringIO(a.split("\n", 1)[1])))
    assert len(rows) == 6 and all(len(r) == 252 for r in rows)
    assert [r[0] for r in rows[1:]] == ids


def test_zero_input_matches_forward_capture():
    m = build_model("A", 3)
    x = np.zeros((1, 10, 10, 32), np.float32)
    text = export_activations(m, x, ["z"], ["clean-NH"])
    row = next(csv.reader(io.StringIO(text.splitlines()[1])))
    _, acts = m.forward(x, capture=["fc1"])
    assert np.array_equal(np.array(row[2:], dtype=np.float32), acts["fc1"][0])


def test_activation_errors():
    m = build_model("A")
    with pytest.raises(ShapeError):
        export_activations(m, np.zeros((1, 10, 10, 32)), ["a"], ["x"], layer="nope")
    with pytest.raises(EvaluationError):
        export_activations(m, np.zeros((1, 10, 10, 32)), ["a", "b"], ["x"])


# -- sweep table --------------------------------------------------------------------

def _rep(level, asr, arch="A"):
    mats = {s: ConfusionMatrix(((9, 1), (0, 0)) if s.endswith("NH") else ((0, 0), (1, 9))) for s in SLICES}
    return EvalReport(arch, level, mats, asr)


def test_sweep_sorted_with_relative_asr():
    text, rows = sweep_report([_rep(50, 0.1), _rep(0, 0.8), _rep(3, 0.6)], digest="dd")
    assert [r["level"] for r in rows] == [0, 3, 50]
    assert [r["A:R-ASR"] for r in rows] == [1.0, pytest.approx(0.75), pytest.approx(0.125)]
    lines = text.splitlines()
    assert lines[0] == "# config_digest=dd"
    assert lines[1] == "level,A:C-NH,A:C-HS,A:P-NH,A:P-HS,A:ASR,A:R-ASR"
    assert lines[2] == "0,0.9000,0.9000,0.9000,0.9000,0.8000,1.0000"


def test_single_level_zero():
    _, rows = sweep_report([_rep(0, 0.4)])
    assert rows[0]["A:R-ASR"] == 1.0


def test_two_architectures():
    _, rows = sweep_report([_rep(0, 0.8, "A"), _rep(0, 0.5, "B"), _rep(12, 0.25, "B")])
    assert rows[1]["A:ASR"] is None and rows[1]["B:R-ASR"] == pytest.approx(0.5)
    assert "B:R-ASR" in text_table(rows).splitlines()[0]


def test_missing_baseline():
    with pytest.raises(EvaluationError):
        sweep_report([_rep(3, 0.5)])
