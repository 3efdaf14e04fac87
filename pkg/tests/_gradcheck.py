"""Central finite differences for the layer gradient suites."""

import numpy as np

from hotspot_defense.nn import Conv2D, Dense, Flatten, MaxPool2, ReLU, weighted_cross_entropy


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def _step(v):
    return max(1e-5, 1e-3 * abs(v))


def numeric_grad(f, arr):
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        h = _step(old)
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _distinct(rng, shape):
    # well separated values so a small step never swaps a pooling winner
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape)


def make_layer(kind, rng):
    """A random float64 layer instance and an input that keeps it differentiable."""
    n = int(rng.integers(1, 4))
    if kind == "conv":
        cin, cout, h, w = map(int, rng.integers(1, 4, 4) + np.array([0, 0, 2, 2]))
        layer = Conv2D("c", cin, cout)
        layer.params = {"W": rng.normal(size=(3, 3, cin, cout)), "b": rng.normal(size=cout)}
        return layer, rng.normal(size=(n, h, w, cin))
    if kind == "dense":
        nin, nout = (int(v) for v in rng.integers(1, 8, 2))
        layer = Dense("d", nin, nout)
        layer.params = {"W": rng.normal(size=(nin, nout)), "b": rng.normal(size=nout)}
        return layer, rng.normal(size=(n, nin))
    if kind == "relu":
        return ReLU("r"), _away_from_zero(rng, (n, 3, 3, 2))
    if kind == "pool":
        h, w = (int(v) for v in rng.integers(2, 6, 2))
        return MaxPool2("p"), _distinct(rng, (n, h, w, 2))
    if kind == "flatten":
        return Flatten("f"), rng.normal(size=(n, 2, 3, 2))
    raise ValueError(kind)


def layer_errors(layer, x, rng):
    """Relative errors of the input gradient and of every parameter gradient."""
    out = layer.forward(x)
    r = rng.normal(size=out.shape)
    dx = layer.backward(r)

    def loss():
        return float((layer.forward(x) * r).sum())

    errs = {"x": rel_error(dx, numeric_grad(loss, x))}
    analytic = {k: v.copy() for k, v in layer.grads.items()}
    for k, p in layer.params.items():
        errs[k] = rel_error(analytic[k], numeric_grad(loss, p))
    return errs


def softmax_ce_error(rng):
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 5))
    z = rng.normal(size=(n, k)) * 3
    y = rng.integers(0, k, n)
    w = rng.uniform(0.5, 5, n)
    _, d = weighted_cross_entropy(z, y, w)
    return rel_error(d, numeric_grad(lambda: weighted_cross_entropy(z, y, w)[0], z))


LAYER_KINDS = ("conv", "dense", "relu", "pool", "flatten")
