"""Small model builders shared by the test modules."""
import numpy as np

from deltarank.lowrank import decompose_conv, decompose_dense
from deltarank.model_ir import Conv2D, Dense, Flatten, MaxPool2D, Model, ReLU
from deltarank.runtime import cross_entropy, forward, loss_and_grads, model_params, with_params
from deltarank.tensor_core import ConvGeometry
from oracles import finite_difference


def conv(rng, kh, kw, cin, cout, stride=(1, 1), pad=(0, 0), scale=0.5):
    g = ConvGeometry(kh, kw, cin, cout, stride[0], stride[1], pad[0], pad[1])
    return Conv2D(g, rng.standard_normal(g.kernel_shape) * scale, rng.standard_normal(cout) * 0.1)


def dense(rng, n_in, n_out, scale=0.5):
    return Dense(n_in, n_out, rng.standard_normal((n_in, n_out)) * scale,
                 rng.standard_normal(n_out) * 0.1)


def tiny_cnn(seed=0, classes=3):
    """conv(2->3)-ReLU-pool-flatten-dense: every parametric layer dense."""
    rng = np.random.default_rng(seed)
    layers = [
        conv(rng, 3, 3, 2, 3, pad=(1, 1)),
        ReLU(),
        MaxPool2D(),
        Flatten(),
        dense(rng, 3 * 3 * 3, classes),
    ]
    return Model(layers, (2, 6, 6), classes, name="tiny")


def tiny_decomposed_cnn(seed=0, classes=3):
    """Same graph with a decomposed conv (stride 2) and decomposed dense."""
    rng = np.random.default_rng(seed)
    c = conv(rng, 3, 3, 2, 4, stride=(2, 2), pad=(1, 1))
    d = dense(rng, 4 * 5 * 5, 5)
    layers = [
        decompose_conv(c, 2, restarts=1, seed=seed),
        ReLU(),
        Flatten(),
        decompose_dense(d, 3),
        ReLU(),
        dense(rng, 5, classes),
    ]
    return Model(layers, (2, 9, 9), classes, name="tiny_dec")


class ScriptedTuner:
    """No training; validation accuracy comes from a fixed function of the model."""

    def __init__(self, score_fn):
        self.score_fn = score_fn
        self.calls = 0

    def tune(self, model, epochs, *key):
        self.calls += 1
        return model

    def score(self, model):
        return self.score_fn(model)


def small_model(seed=5):
    rng = np.random.default_rng(seed)
    return Model(
        [conv(rng, 3, 3, 1, 8, pad=(1, 1)), ReLU(), MaxPool2D(), Flatten(), dense(rng, 8 * 6 * 6, 4)],
        (1, 12, 12), 4,
    )


def grad_model_a(seed=0):
    rng = np.random.default_rng(seed)
    layers = [
        conv(rng, 3, 3, 2, 3, pad=(1, 1)),
        ReLU(),
        decompose_conv(conv(rng, 3, 3, 3, 4, stride=(2, 2), pad=(1, 1)), 2, restarts=1),
        ReLU(),
        Flatten(),
        decompose_dense(dense(rng, 64, 6), 3),
        dense(rng, 6, 3),
    ]
    return Model(layers, (2, 7, 7), 3)


def grad_model_b(seed=0):
    rng = np.random.default_rng(seed)
    layers = [
        decompose_conv(conv(rng, 3, 3, 2, 3), 3, restarts=1),
        MaxPool2D(),
        conv(rng, 3, 3, 3, 4, stride=(2, 2), pad=(1, 1)),
        Flatten(),
        dense(rng, 16, 3),
    ]
    return Model(layers, (2, 8, 8), 3)


def fd_check(model, x, y, tol=1e-4):
    """Central-difference check of every parameter gradient; returns the count checked."""
    _, grads = loss_and_grads(model, x, y)
    params = [{k: np.array(v) for k, v in p.items()} for p in model_params(model)]

    def loss():
        return cross_entropy(forward(with_params(model, params), x), y)[0]

    checked = 0
    for i, p in enumerate(params):
        for name, arr in p.items():
            num = finite_difference(loss, arr)
            ana = grads[i][name]
            scale = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-8)
            err = np.linalg.norm(num - ana) / scale
            assert err < tol, f"layer {i} ({type(model.layers[i]).__name__}).{name}: rel err {err:.2e}"
            checked += 1
    return checked
