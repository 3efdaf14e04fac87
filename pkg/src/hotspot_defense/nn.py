"""Small CNN engine: NHWC layers with hand-written backward passes, Adam,
plateau LR schedule, early stopping and checkpoint selection.

Layers work in whatever float dtype their parameters hold: float32 for
training, float64 for gradient checks.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .seeding import rng_for


class ShapeError(ValueError):
    pass


class TrainingSetupError(ValueError):
    pass


class SelectionError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


# -- layers ------------------------------------------------------------------

class Layer:
    name: str = ""
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def __init__(self, name: str):
        self.name = name
        self.params = {}
        self.grads = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape


class Conv2D(Layer):
    """3x3 stride-1 convolution, zero same-padding."""

    def __init__(self, name: str, cin: int, cout: int, k: int = 3):
        super().__init__(name)
        self.k = k
        self.params = {"W": np.zeros((k, k, cin, cout), np.float32),
                       "b": np.zeros(cout, np.float32)}

    def _patches(self, x: np.ndarray) -> np.ndarray:
        p = self.k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(xp, (self.k, self.k), axis=(1, 2))  # N,H,W,C,kh,kw
        n, h, w, c = x.shape
        return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, self.k * self.k * c)

    def forward(self, x: np.ndarray) -> np.ndarray:
        W = self.params["W"]
        if x.ndim != 4 or x.shape[3] != W.shape[2]:
            raise ShapeError(f"{self.name}: expected (N,H,W,{W.shape[2]}), got {x.shape}")
        self._x_shape = x.shape
        self._cols = self._patches(x)
        y = self._cols @ W.reshape(-1, W.shape[3]) + self.params["b"]
        n, h, w, _ = x.shape
        return y.reshape(n, h, w, W.shape[3])

    def backward(self, dy: np.ndarray) -> np.ndarray:
        W = self.params["W"]
        k, _, cin, cout = W.shape
        n, h, w, _ = self._x_shape
        d2 = dy.reshape(-1, cout)
        self.grads["W"] = (self._cols.T @ d2).reshape(W.shape)
        self.grads["b"] = d2.sum(axis=0)
        # input gradient = same-padded correlation of dy with the flipped, transposed kernel
        wf = W[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, cin)
        dx = self._patches(dy) @ wf
        return dx.reshape(n, h, w, cin)

    def output_shape(self, shape):
        return shape[:2] + (self.params["W"].shape[3],)


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dy):
        return np.where(self._mask, dy, 0).astype(dy.dtype, copy=False)


class MaxPool2(Layer):
    """2x2 stride-2 max pooling, floor mode. Ties route the gradient to the first maximum."""

    def forward(self, x):
        n, h, w, c = x.shape
        ho, wo = h // 2, w // 2
        self._x_shape = x.shape
        win = x[:, :2 * ho, :2 * wo, :].reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4)
        win = win.reshape(n, ho, wo, c, 4)
        self._arg = win.argmax(axis=-1)
        return np.take_along_axis(win, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        n, h, w, c = self._x_shape
        ho, wo = h // 2, w // 2
        onehot = np.zeros((n, ho, wo, c, 4), dy.dtype)
        np.put_along_axis(onehot, self._arg[..., None], dy[..., None], axis=-1)
        blk = onehot.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * ho, 2 * wo, c)
        dx = np.zeros(self._x_shape, dy.dtype)
        dx[:, :2 * ho, :2 * wo, :] = blk
        return dx

    def output_shape(self, shape):
        return (shape[0] // 2, shape[1] // 2, shape[2])


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Dense(Layer):
    def __init__(self, name: str, nin: int, nout: int):
        super().__init__(name)
        self.params = {"W": np.zeros((nin, nout), np.float32), "b": np.zeros(nout, np.float32)}

    def forward(self, x):
        W = self.params["W"]
        if x.ndim != 2 or x.shape[1] != W.shape[0]:
            raise ShapeError(f"{self.name}: expected (N,{W.shape[0]}), got {x.shape}")
        self._x = x
        return x @ W + self.params["b"]

    def backward(self, dy):
        self.grads["W"] = self._x.T @ dy
        self.grads["b"] = dy.sum(axis=0)
        return dy @ self.params["W"].T

    def output_shape(self, shape):
        return (self.params["W"].shape[1],)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def weighted_cross_entropy(logits: np.ndarray, y: np.ndarray,
                           weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean of w_i * -log p_i[y_i] over the batch, and its gradient w.r.t. the logits.

    The gradient per sample is w_i * (p_i - onehot(y_i)) / N.
    """
    n = logits.shape[0]
    p = softmax(logits)
    w = np.ones(n, logits.dtype) if weights is None else weights.astype(logits.dtype)
    picked = np.clip(p[np.arange(n), y], np.finfo(p.dtype).tiny, None)
    loss = float(np.sum(w * -np.log(picked)) / n)
    d = p.copy()
    d[np.arange(n), y] -= 1
    d *= (w / n)[:, None]
    return loss, d


# -- architectures -------------------------------------------------------------

INPUT_SHAPE = (10, 10, 32)


@dataclass(frozen=True)
class ArchSpec:
    """Layer descriptors: ("conv", cout) | ("pool",) | ("flatten",) | ("dense", n, act)."""

    name: str
    layers: tuple[tuple, ...]
    input_shape: tuple[int, int, int] = INPUT_SHAPE
    expected_shapes: tuple[tuple[int, ...], ...] = ()

    def descriptor(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape),
                "layers": [list(l) for l in self.layers]}

    @classmethod
    def from_descriptor(cls, d: dict) -> ArchSpec:
        return cls(d["name"], tuple(tuple(l) for l in d["layers"]), tuple(d["input_shape"]))


def _arch(name: str, convs1: int, c1: int, convs2: int, c2: int) -> ArchSpec:
    layers = [("conv", c1)] * convs1 + [("pool",)] + [("conv", c2)] * convs2 + [("pool",)]
    layers += [("flatten",), ("dense", 250, "relu"), ("dense", 2, "softmax")]
    shapes = [(10, 10, c1)] * convs1 + [(5, 5, c1)] + [(5, 5, c2)] * convs2 + [(2, 2, c2)]
    shapes += [(4 * c2,), (250,), (2,)]
    return ArchSpec(name, tuple(layers), INPUT_SHAPE, tuple(shapes))


ARCH_A = _arch("A", 2, 16, 2, 32)
ARCH_B = _arch("B", 4, 32, 4, 64)
ARCHS = {"A": ARCH_A, "B": ARCH_B}


class Model:
    """Sequential network built from an ArchSpec; ReLU/softmax are separate internal steps."""

    def __init__(self, arch: ArchSpec, seed: int = 0, input_scale: float = 1.0,
                 dtype=np.float32):
        self.arch = arch
        self.input_scale = float(input_scale)
        self.config_digest = ""
        self.layers: list[Layer] = []
        self.named: list[str] = []  # public name per spec row
        self.sub_shapes: list[tuple[int, ...]] = []
        shape = tuple(arch.input_shape)
        counters = {"conv": [1, 0], "dense": 0}
        shapes = []
        for row in arch.layers:
            kind = row[0]
            if kind == "conv":
                counters["conv"][1] += 1
                nm = f"conv{counters['conv'][0]}_{counters['conv'][1]}"
                conv = Conv2D(nm, shape[2], int(row[1]))
                self.layers += [conv, ReLU(nm + "_relu")]
            elif kind == "pool":
                nm = f"pool{counters['conv'][0]}"
                counters["conv"] = [counters["conv"][0] + 1, 0]
                self.layers.append(MaxPool2(nm))
            elif kind == "flatten":
                nm = "flatten"
                self.layers.append(Flatten(nm))
            elif kind == "dense":
                counters["dense"] += 1
                nm = f"fc{counters['dense']}"
                self.layers.append(Dense(nm, shape[0], int(row[1])))
                if row[2] == "relu":
                    self.layers.append(ReLU(nm + "_relu"))
                elif row[2] != "softmax":
                    raise ShapeError(f"unknown activation {row[2]!r}")
            else:
                raise ShapeError(f"unknown layer kind {kind!r}")
            for layer in self.layers[len(self.named):]:
                shape = layer.output_shape(shape)
                self.named.append(nm)
                self.sub_shapes.append(shape)
            shapes.append(shape)
        if arch.expected_shapes and tuple(shapes) != tuple(arch.expected_shapes):
            raise ShapeError(f"shape chain {shapes} != expected {list(arch.expected_shapes)}")
        self.shapes = tuple(shapes)
        self._init(seed)
        self.astype(dtype)

    def _init(self, seed: int) -> None:
        dense_rows = [r for r in self.arch.layers if r[0] == "dense"]
        for i, layer in enumerate(self.param_layers()):
            W = layer.params["W"]
            fan_in = int(np.prod(W.shape[:-1]))
            fan_out = W.shape[-1] * (int(np.prod(W.shape[:2])) if W.ndim == 4 else 1)
            softmax_out = isinstance(layer, Dense) and layer is self.param_layers()[-1] \
                and dense_rows[-1][2] == "softmax"
            limit = math.sqrt(6.0 / (fan_in + fan_out)) if softmax_out else math.sqrt(6.0 / fan_in)
            rng = rng_for(seed, "init", i)
            layer.params["W"] = rng.uniform(-limit, limit, W.shape)
            layer.params["b"] = np.zeros_like(layer.params["b"], dtype=np.float64)

    def astype(self, dtype) -> Model:
        for layer in self.param_layers():
            for k in layer.params:
                layer.params[k] = layer.params[k].astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def layer_shape(self, name: str) -> tuple[int, ...]:
        """Per-sample output shape of a named layer (after its activation)."""
        if name not in self.named:
            raise ShapeError(f"unknown layer {name!r}")
        return self.sub_shapes[len(self.named) - 1 - self.named[::-1].index(name)]

    def param_layers(self) -> list[Layer]:
        return [l for l in self.layers if l.params]

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{l.name}.{k}", l.params[k]) for l in self.param_layers() for k in ("W", "b")]

    def parameter_count(self) -> int:
        return int(sum(p.size for _, p in self.parameters()))

    def logits(self, x: np.ndarray, capture: Iterable[str] = ()) -> tuple[np.ndarray, dict]:
        x = np.asarray(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.arch.input_shape):
            raise ShapeError(f"input must be (N,{','.join(map(str, self.arch.input_shape))}), got {x.shape}")
        want = set(capture)
        unknown = want - set(self.named)
        if unknown:
            raise ShapeError(f"unknown layer names {sorted(unknown)}")
        h = x.astype(self.dtype, copy=False)
        if self.input_scale != 1.0:
            h = h * self.dtype.type(self.input_scale)
        acts = {}
        for layer, nm in zip(self.layers, self.named):
            h = layer.forward(h)
            if nm in want:
                acts[nm] = h  # last sub-step wins: post-activation output
        return h, acts

    def forward(self, x: np.ndarray, capture: Iterable[str] = ()) -> tuple[np.ndarray, dict]:
        z, acts = self.logits(x, capture)
        return softmax(z), acts

    def predict_proba(self, x: np.ndarray, batch: int = 512) -> np.ndarray:
        if len(x) == 0:
            return np.zeros((0, 2), self.dtype)
        return np.concatenate([self.forward(x[i:i + batch])[0] for i in range(0, len(x), batch)])

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Class indices; 1 = Hotspot, and a tie goes to Hotspot."""
        p = self.predict_proba(x)
        return (p[:, 1] >= p[:, 0]).astype(np.int64)

    def backward(self, dlogits: np.ndarray) -> None:
        g = dlogits
        for layer in reversed(self.layers):
            g = layer.backward(g)

    def snapshot(self) -> list[np.ndarray]:
        return [p.copy() for _, p in self.parameters()]

    def load_snapshot(self, snap: Sequence[np.ndarray]) -> None:
        i = 0
        for layer in self.param_layers():
            for k in ("W", "b"):
                layer.params[k] = np.array(snap[i], dtype=self.dtype)
                i += 1


def build_model(arch: Union[str, ArchSpec], seed: int = 0, input_scale: float = 1.0) -> Model:
    spec = ARCHS[arch] if isinstance(arch, str) else arch
    return Model(spec, seed, input_scale)


# -- optimisation ---------------------------------------------------------------

class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def step(self, model: Model) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        i = 0
        for layer in model.param_layers():
            for k in ("W", "b"):
                p, g = layer.params[k], layer.grads[k]
                m = self.m.setdefault(i, np.zeros_like(p))
                v = self.v.setdefault(i, np.zeros_like(p))
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * (g * g)
                upd = (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
                layer.params[k] = p - upd
                i += 1


class PlateauSchedule:
    """Multiply the LR by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float = 1e-3, factor: float = 0.3, patience: int = 3, min_lr: float = 1e-5):
        self.initial, self.factor, self.patience, self.min_lr = lr, factor, patience, min_lr
        self.events = 0
        self.wait = 0
        self.best = math.inf

    @property
    def lr(self) -> float:
        return max(self.initial * self.factor ** self.events, self.min_lr)

    def update(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.events += 1
                self.wait = 0
        return self.lr


class EarlyStopping:
    def __init__(self, patience: int = 10):
        self.patience = patience
        self.wait = 0
        self.best = math.inf

    def update(self, val_loss: float) -> bool:
        """Record an epoch; True means stop now."""
        if val_loss < self.best:
            self.best = val_loss
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


# -- training ---------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    min_lr: float = 1e-5
    lr_reduce_factor: float = 0.3
    lr_patience: int = 3
    early_stop_patience: int = 10
    max_epochs: int = 20
    class_weight: float | None = None  # None: clamp(round(N_nh / N_hs), 2, 22)
    validation_fraction: float = 0.10
    input_scale: float = 1.0
    seed: int = 0

    @classmethod
    def from_mapping(cls, data) -> TrainConfig:
        from dataclasses import fields
        data = dict(data or {})
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise TrainingSetupError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def default_class_weight(n_nonhotspot: int, n_hotspot: int) -> float:
    return float(min(max(round(n_nonhotspot / n_hotspot), 2), 22))


@dataclass
class Checkpoint:
    epoch: int
    params: list[np.ndarray]
    train_loss: float
    val_loss: float
    val_acc_nhs: float
    val_acc_hs: float
    val_acc: float
    lr: float

    @property
    def hs_recall(self) -> float:
        return self.val_acc_hs


@dataclass
class TrainResult:
    arch: ArchSpec
    checkpoints: list[Checkpoint]
    class_weight: float
    input_scale: float
    stopped_early: bool

    def log_csv(self, digest: str = "") -> str:
        buf = io.StringIO()
        if digest:
            buf.write(f"# config_digest={digest}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_loss", "val_acc_nhs", "val_acc_hs", "val_acc", "lr"])
        for c in self.checkpoints:
            w.writerow([c.epoch, f"{c.train_loss:.6f}", f"{c.val_loss:.6f}", f"{c.val_acc_nhs:.6f}",
                        f"{c.val_acc_hs:.6f}", f"{c.val_acc:.6f}", f"{c.lr:.8g}"])
        return buf.getvalue()

    def model_at(self, ckpt: Checkpoint) -> Model:
        m = Model(self.arch, 0, self.input_scale)
        m.load_snapshot(ckpt.params)
        return m


def stratified_split(y: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(train_idx, val_idx) with ``fraction`` of each class (at least one) held out."""
    rng = rng_for(seed, "split")
    tr, va = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        k = max(1, int(round(fraction * len(idx)))) if fraction > 0 else 0
        va.append(idx[:k])
        tr.append(idx[k:])
    return np.sort(np.concatenate(tr)), np.sort(np.concatenate(va))


def _val_metrics(model: Model, x: np.ndarray, y: np.ndarray) -> tuple[float, float, float, float]:
    z = np.concatenate([model.logits(x[i:i + 512])[0] for i in range(0, len(x), 512)])
    loss, _ = weighted_cross_entropy(z, y)
    pred = (z[:, 1] >= z[:, 0]).astype(np.int64)
    acc_n = float(np.mean(pred[y == 0] == 0)) if np.any(y == 0) else float("nan")
    acc_h = float(np.mean(pred[y == 1] == 1)) if np.any(y == 1) else float("nan")
    return loss, acc_n, acc_h, float(np.mean(pred == y))


def train(arch: Union[str, ArchSpec], x: np.ndarray, y: np.ndarray,
          cfg: TrainConfig | None = None,
          on_epoch: Callable[[Checkpoint], None] | None = None) -> TrainResult:
    """Train from a seed-derived init; one checkpoint per epoch.

    ``y`` holds 1 for Hotspot and 0 for NonHotspot. The class weight scales
    the loss of hotspot samples; validation loss is unweighted.
    """
    cfg = cfg or TrainConfig()
    spec = ARCHS[arch] if isinstance(arch, str) else arch
    y = np.asarray(y, dtype=np.int64)
    if len(x) != len(y) or len(y) == 0:
        raise TrainingSetupError("need the same, non-zero number of samples and labels")
    if not (np.any(y == 0) and np.any(y == 1)):
        raise TrainingSetupError("training data must contain both classes")
    tr, va = stratified_split(y, cfg.validation_fraction, cfg.seed)
    xt, yt, xv, yv = x[tr], y[tr], x[va], y[va]
    n_h = int(yt.sum())
    if n_h == 0 or n_h == len(yt):
        raise TrainingSetupError("training split lost a class; add more data")
    cw = cfg.class_weight if cfg.class_weight is not None else default_class_weight(len(yt) - n_h, n_h)
    model = Model(spec, cfg.seed, cfg.input_scale)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    sched = PlateauSchedule(cfg.lr, cfg.lr_reduce_factor, cfg.lr_patience, cfg.min_lr)
    stopper = EarlyStopping(cfg.early_stop_patience)
    weights = np.where(yt == 1, cw, 1.0).astype(np.float32)
    ckpts: list[Checkpoint] = []
    stopped = False
    for epoch in range(1, cfg.max_epochs + 1):
        opt.lr = sched.lr
        order = rng_for(cfg.seed, "shuffle", epoch).permutation(len(yt))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            z, _ = model.logits(xt[b])
            loss, dz = weighted_cross_entropy(z, yt[b], weights[b])
            model.backward(dz)
            opt.step(model)
            total += loss * len(b)
        vl, an, ah, acc = _val_metrics(model, xv, yv)
        ck = Checkpoint(epoch, model.snapshot(), total / len(yt), vl, an, ah, acc, opt.lr)
        ckpts.append(ck)
        if on_epoch:
            on_epoch(ck)
        sched.update(vl)
        if stopper.update(vl):
            stopped = True
            break
    return TrainResult(spec, ckpts, cw, cfg.input_scale, stopped)


@dataclass(frozen=True)
class Selection:
    chosen: object
    degraded: bool


def select_model(candidates: Sequence, min_recall: float = 0.90) -> Selection:
    """Highest overall accuracy among candidates with hotspot recall >= ``min_recall``.

    Candidates expose ``val_acc`` and ``hs_recall`` attributes (or are
    (overall, recall) pairs). With no candidate clearing the bar the highest
    recall wins and the selection is flagged as degraded. Earlier candidates
    win ties.
    """
    if not candidates:
        raise SelectionError("no candidates to select from")

    def acc(c):
        return c[0] if isinstance(c, tuple) else c.val_acc

    def rec(c):
        return c[1] if isinstance(c, tuple) else c.hs_recall

    ok = [c for c in candidates if rec(c) >= min_recall]
    if ok:
        best = ok[0]
        for c in ok[1:]:
            if acc(c) > acc(best):
                best = c
        return Selection(best, False)
    best = candidates[0]
    for c in candidates[1:]:
        if rec(c) > rec(best) or (rec(c) == rec(best) and acc(c) > acc(best)):
            best = c
    return Selection(best, True)


# -- container ------------------------------------------------------------------

MODEL_MAGIC = b"HSDM"
MODEL_VERSION = 1


def model_bytes(model: Model) -> bytes:
    desc = dict(model.arch.descriptor(), input_scale=model.input_scale)
    if model.config_digest:
        desc["config_digest"] = model.config_digest
    d = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(d)), d]
    params = model.parameters()
    out.append(struct.pack("<I", len(params)))
    for _, p in params:
        out.append(struct.pack("<I", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        out.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return b"".join(out)


def save_model(model: Model, path: Union[str, Path]) -> int:
    data = model_bytes(model)
    Path(path).write_bytes(data)
    return len(data)


def parse_model(data: bytes) -> Model:
    def need(off: int, n: int) -> None:
        if off + n > len(data):
            raise ModelFormatError(f"truncated model file at byte {off}")

    need(0, 12)
    if data[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {data[:4]!r}")
    version, dlen = struct.unpack_from("<II", data, 4)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    need(12, dlen)
    try:
        desc = json.loads(data[12:12 + dlen].decode("utf-8"))
        spec = ArchSpec.from_descriptor(desc)
        known = ARCHS.get(spec.name)
        if known is not None and known.layers == spec.layers:
            spec = known
        model = Model(spec, 0, float(desc.get("input_scale", 1.0)))
        model.config_digest = str(desc.get("config_digest", ""))
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"bad architecture descriptor: {exc}") from exc
    off = 12 + dlen
    need(off, 4)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    expected = model.parameters()
    if count != len(expected):
        raise ModelFormatError(f"{count} tensors stored, architecture has {len(expected)}")
    snap = []
    for name, ref in expected:
        need(off, 4)
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        need(off, 4 * ndim)
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        if tuple(shape) != ref.shape:
            raise ModelFormatError(f"{name}: stored shape {shape} != architecture shape {ref.shape}")
        size = int(np.prod(shape)) * 4
        need(off, size)
        snap.append(np.frombuffer(data, dtype="<f4", count=size // 4, offset=off).reshape(shape))
        off += size
    if off != len(data):
        raise ModelFormatError(f"{len(data) - off} trailing bytes")
    model.load_snapshot(snap)
    return model


def load_model(path: Union[str, Path]) -> Model:
    return parse_model(Path(path).read_bytes())
