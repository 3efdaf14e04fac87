import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _gradcheck import LAYER_KINDS, layer_errors, make_layer, numeric_grad, rel_error, softmax_ce_error
from _oracles import param_count
from hotspot_defense.nn import (
    ARCH_A,
    ARCH_B,
    Adam,
    ArchSpec,
    Checkpoint,
    EarlyStopping,
    Model,
    ModelFormatError,
    PlateauSchedule,
    SelectionError,
    ShapeError,
    TrainConfig,
    TrainingSetupError,
    build_model,
    default_class_weight,
    load_model,
    model_bytes,
    parse_model,
    save_model,
    select_model,
    softmax,
    stratified_split,
    train,
    weighted_cross_entropy,
)

TABLE_A = [("conv", 16), ("conv", 16), ("pool", 0), ("conv", 32), ("conv", 32), ("pool", 0),
           ("dense", 250), ("dense", 2)]
TABLE_B = [("conv", 32)] * 4 + [("pool", 0)] + [("conv", 64)] * 4 + [("pool", 0), ("dense", 250), ("dense", 2)]


# -- gradients -------------------------------------------------------------------

@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_layer_gradients(kind):
    rng = np.random.default_rng(LAYER_KINDS.index(kind))
    for _ in range(50):
        layer, x = make_layer(kind, rng)
        errs = layer_errors(layer, x, rng)
        assert max(errs.values()) < 1e-4, errs


def test_softmax_ce_gradient():
    rng = np.random.default_rng(5)
    assert max(softmax_ce_error(rng) for _ in range(50)) < 1e-4


def test_combined_gradient_is_p_minus_y():
    z = np.array([[1.0, -2.0], [0.3, 0.4], [5.0, 5.0]])
    y = np.array([0, 1, 1])
    _, d = weighted_cross_entropy(z, y)
    p = softmax(z)
    assert np.allclose(d * 3, p - np.eye(2)[y])


def test_weighted_loss_identity():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(6, 2))
    y = np.array([0, 1, 0, 1, 1, 0])
    plain, d0 = weighted_cross_entropy(z, y)
    ones, d1 = weighted_cross_entropy(z, y, np.ones(6))
    assert plain == ones and np.array_equal(d0, d1)
    w = np.where(y == 1, 7.0, 1.0)
    _, dw = weighted_cross_entropy(z, y, w)
    assert np.allclose(dw[y == 1], 7 * d0[y == 1]) and np.allclose(dw[y == 0], d0[y == 0])


def test_whole_model_gradient():
    spec = ArchSpec("t", (("conv", 2), ("pool",), ("flatten",), ("dense", 3, "relu"), ("dense", 2, "softmax")),
                    (4, 4, 2))
    model = Model(spec, seed=3, dtype=np.float64)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 4, 4, 2))
    y = np.array([0, 1, 1])

    def loss():
        return weighted_cross_entropy(model.logits(x)[0], y)[0]

    _, d = weighted_cross_entropy(model.logits(x)[0], y)
    model.backward(d)
    for layer in model.param_layers():
        for k, p in layer.params.items():
            analytic = layer.grads[k].copy()
            assert rel_error(analytic, numeric_grad(loss, p)) < 1e-4


# -- architecture -----------------------------------------------------------------

def test_parameter_counts_match_hand_audit():
    assert param_count(TABLE_A) == 53_584 == build_model("A").parameter_count()
    assert param_count(TABLE_B) == 231_024 == build_model("B").parameter_count()


def test_shape_chain():
    assert build_model("A").shapes == ((10, 10, 16), (10, 10, 16), (5, 5, 16), (5, 5, 32), (5, 5, 32),
                                       (2, 2, 32), (128,), (250,), (2,))
    assert build_model("B").shapes[4] == (5, 5, 32) and build_model("B").shapes[9] == (2, 2, 64)
    bad = ArchSpec("x", ARCH_A.layers, (10, 10, 32), ARCH_B.expected_shapes)
    with pytest.raises(ShapeError):
        Model(bad)


@given(st.integers(0, 1000), st.integers(1, 5))
@settings(max_examples=10, deadline=None)
def test_softmax_outputs_sum_to_one(seed, n):
    x = np.random.default_rng(seed).normal(size=(n, 10, 10, 32)) * 50
    p, _ = build_model("A", seed).forward(x)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-6)


def test_forward_rejects_bad_shape_and_layer():
    m = build_model("A")
    with pytest.raises(ShapeError):
        m.forward(np.zeros((1, 10, 10, 36)))
    with pytest.raises(ShapeError):
        m.forward(np.zeros((1, 10, 10, 32)), capture=["fc9"])


def test_capture_first_dense():
    m = build_model("A", 1)
    x = np.random.default_rng(0).normal(size=(4, 10, 10, 32))
    _, acts = m.forward(x, capture=["fc1"])
    assert acts["fc1"].shape == (4, 250) and (acts["fc1"] >= 0).all()
    assert m.layer_shape("fc1") == (250,)


def test_init_is_seeded_he_and_glorot():
    a, b, c = build_model("A", 4), build_model("A", 4), build_model("A", 5)
    assert all(np.array_equal(p, q) for (_, p), (_, q) in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.parameters()[0][1], c.parameters()[0][1])
    w1 = a.parameters()[0][1]
    assert np.abs(w1).max() <= math.sqrt(6 / (9 * 32))
    w_out = a.parameters()[-2][1]
    assert np.abs(w_out).max() <= math.sqrt(6 / (250 + 2))


# -- optimiser and schedule -------------------------------------------------------

def test_adam_first_step_is_lr_times_sign():
    spec = ArchSpec("t", (("flatten",), ("dense", 2, "softmax")), (1, 1, 3))
    m = Model(spec, dtype=np.float64)
    layer = m.param_layers()[0]
    before = layer.params["W"].copy()
    layer.grads = {"W": np.array([[0.5, -2.0], [1e-3, 0.0], [-7.0, 3.0]]), "b": np.array([1.0, -1.0])}
    Adam(lr=0.001).step(m)
    step = before - layer.params["W"]
    nz = layer.grads["W"] != 0
    assert np.allclose(step[nz], 0.001 * np.sign(layer.grads["W"][nz]), rtol=1e-6)
    assert step[~nz] == 0


@pytest.mark.parametrize("k", range(8))
def test_lr_after_k_events(k):
    s = PlateauSchedule()
    s.events = k
    assert s.lr == pytest.approx(max(0.001 * 0.3 ** k, 1e-5))


def test_two_reductions():
    s = PlateauSchedule()
    lrs = [s.update(v) for v in [1.0] + [2.0] * 6]
    assert lrs[3] == pytest.approx(3e-4) and lrs[-1] == pytest.approx(9e-5)


def test_early_stop_after_exactly_ten():
    e = EarlyStopping()
    assert not e.update(1.0)
    flags = [e.update(1.0 + i) for i in range(10)]
    assert flags == [False] * 9 + [True]
    e2 = EarlyStopping()
    e2.update(1.0)
    seq = [e2.update(v) for v in [2, 2, 2, 0.5] + [3] * 9]
    assert not any(seq)


def test_class_weight_default():
    assert default_class_weight(1000, 10) == 22
    assert default_class_weight(100, 10) == 10
    assert default_class_weight(10, 10) == 2


def test_stratified_split():
    y = np.array([0] * 90 + [1] * 10)
    tr, va = stratified_split(y, 0.1, 3)
    assert y[va].sum() == 1 and len(va) == 10
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(100))


# -- selection --------------------------------------------------------------------

def test_selection_examples():
    cands = [(0.85, 0.91), (0.87, 0.88), (0.84, 0.93)]
    s = select_model(cands)
    assert s.chosen == cands[0] and not s.degraded
    low = [(0.9, 0.5), (0.8, 0.7), (0.95, 0.6)]
    s = select_model(low)
    assert s.chosen == low[1] and s.degraded
    assert select_model([(0.5, 0.95)]).chosen == (0.5, 0.95)
    with pytest.raises(SelectionError):
        select_model([])


def test_selection_on_checkpoints():
    cks = [Checkpoint(i, [], 0, 0, 0, r, a, 0) for i, (a, r) in enumerate([(0.8, 0.95), (0.9, 0.92), (0.95, 0.5)])]
    assert select_model(cks).chosen.epoch == 1


# -- training ---------------------------------------------------------------------

def _toy_data(n=160, seed=0):
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 8 == 0).astype(int)
    x = rng.normal(size=(n, 10, 10, 32)).astype(np.float32)
    x[y == 1, :, :, 0] += 2.0
    return x, y


def test_training_deterministic_and_bounded():
    x, y = _toy_data()
    cfg = TrainConfig(max_epochs=3, seed=2)
    a, b = train("A", x, y, cfg), train("A", x, y, cfg)
    assert len(a.checkpoints) == 3
    assert all(np.array_equal(p, q) for p, q in zip(a.checkpoints[-1].params, b.checkpoints[-1].params))
    assert a.class_weight == 7 and a.log_csv() == b.log_csv()


def test_training_never_exceeds_twenty_epochs():
    x, y = _toy_data(40)
    res = train("A", x, y, TrainConfig(lr=0.0, min_lr=0.0, early_stop_patience=100))
    assert len(res.checkpoints) == 20


def test_training_stops_on_stagnation():
    x, y = _toy_data(40)
    # with lr 0 the validation loss never improves after epoch 1
    res = train("A", x, y, TrainConfig(lr=0.0, min_lr=0.0))
    assert res.stopped_early and len(res.checkpoints) == 11


def test_training_learns_toy_signal():
    x, y = _toy_data(320)
    res = train("A", x, y, TrainConfig(max_epochs=6, seed=1))
    assert res.checkpoints[-1].val_acc_hs == 1.0 and res.checkpoints[-1].val_acc > 0.9


def test_training_setup_errors():
    x, y = _toy_data(40)
    with pytest.raises(TrainingSetupError):
        train("A", x, np.zeros(40, int))
    with pytest.raises(TrainingSetupError):
        train("A", x[:0], y[:0])
    with pytest.raises(TrainingSetupError):
        TrainConfig.from_mapping({"epochs": 3})


# -- container -------------------------------------------------------------------

def test_save_load_bit_exact(tmp_path):
    m = build_model("B", 9, input_scale=0.01)
    m.config_digest = "f00d"
    p = tmp_path / "m.hsdm"
    assert save_model(m, p) == p.stat().st_size
    back = load_model(p)
    assert back.arch == ARCH_B and back.input_scale == 0.01 and back.config_digest == "f00d"
    for (_, a), (_, b) in zip(m.parameters(), back.parameters()):
        assert a.tobytes() == b.tobytes()
    assert model_bytes(back) == p.read_bytes()


def test_container_errors():
    data = model_bytes(build_model("A"))
    with pytest.raises(ModelFormatError, match="magic"):
        parse_model(b"XXXX" + data[4:])
    with pytest.raises(ModelFormatError, match="version"):
        parse_model(data[:4] + (2).to_bytes(4, "little") + data[8:])
    with pytest.raises(ModelFormatError, match="truncated"):
        parse_model(data[:-10])
    # descriptor claims architecture B but tensors are A-shaped
    desc_a = b'"name":"A"'
    dlen = int.from_bytes(data[8:12], "little")
    desc = data[12:12 + dlen].replace(b"16]", b"32]")
    with pytest.raises(ModelFormatError):
        parse_model(data[:8] + len(desc).to_bytes(4, "little") + desc + data[12 + dlen:])
    assert desc_a in data
