"""Forward/backward execution, SGD training and top-1 evaluation."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .data import AugmentConfig, Dataset, augment
from .model_ir import (
    Conv2D,
    Dense,
    DecomposedConv2D,
    DecomposedDense,
    Flatten,
    MaxPool2D,
    Model,
    ReLU,
)
from .tensor_core import (
    ConvGeometry,
    ShapeError,
    conv2d,
    conv2d_backward,
    depthwise_conv2d,
    depthwise_conv2d_backward,
)

log = logging.getLogger(__name__)


class TrainingFault(RuntimeError):
    """Non-finite loss, activation or gradient."""


# ---------------------------------------------------------------- layer kernels


def _pointwise(c_in: int, c_out: int) -> ConvGeometry:
    return ConvGeometry(1, 1, c_in, c_out)


def _dconv_forward(layer: DecomposedConv2D, x):
    g = layer.geom
    r = layer.rank
    h1 = conv2d(x, layer.f3, _pointwise(g.in_ch, r))
    h2 = depthwise_conv2d(h1, layer.f2, (g.stride_h, 1), (g.pad_h, 0))
    h3 = depthwise_conv2d(h2, layer.f1, (1, g.stride_w), (0, g.pad_w))
    y = conv2d(h3, layer.f4, _pointwise(r, g.out_ch))
    return y + layer.bias[None, :, None, None], (x, h1, h2, h3)


def _dconv_backward(layer: DecomposedConv2D, cache, gy):
    g = layer.geom
    r = layer.rank
    x, h1, h2, h3 = cache
    gh3, gf4 = conv2d_backward(h3, layer.f4, _pointwise(r, g.out_ch), gy)
    gh2, gf1 = depthwise_conv2d_backward(h2, layer.f1, gh3, (1, g.stride_w), (0, g.pad_w))
    gh1, gf2 = depthwise_conv2d_backward(h1, layer.f2, gh2, (g.stride_h, 1), (g.pad_h, 0))
    gx, gf3 = conv2d_backward(x, layer.f3, _pointwise(g.in_ch, r), gh1)
    return gx, {"f1": gf1, "f2": gf2, "f3": gf3, "f4": gf4, "bias": gy.sum(axis=(0, 2, 3))}


def _maxpool_forward(layer: MaxPool2D, x):
    n, c, h, w = x.shape
    k, s = layer.k, layer.stride
    oh, ow = (h - k) // s + 1, (w - k) // s + 1
    out = np.full((n, c, oh, ow), -np.inf)
    for i in range(k):
        for j in range(k):
            np.maximum(out, x[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s], out=out)
    return out, (x, out)


def _maxpool_backward(layer: MaxPool2D, cache, gy):
    x, out = cache
    k, s = layer.k, layer.stride
    oh, ow = out.shape[2:]
    gx = np.zeros_like(x)
    taken = np.zeros(out.shape, dtype=bool)
    # ties route the gradient to the first maximal offset in row-major order
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(None), slice(i, i + s * (oh - 1) + 1, s), slice(j, j + s * (ow - 1) + 1, s))
            hit = (x[sl] == out) & ~taken
            taken |= hit
            gx[sl] += np.where(hit, gy, 0.0)
    return gx, {}


def layer_forward(layer, x):
    """Returns ``(y, cache)`` for one layer on a batch."""
    if isinstance(layer, Conv2D):
        y = conv2d(x, layer.weight, layer.geom) + layer.bias[None, :, None, None]
        return y, x
    if isinstance(layer, Dense):
        return x @ layer.weight + layer.bias, x
    if isinstance(layer, DecomposedConv2D):
        return _dconv_forward(layer, x)
    if isinstance(layer, DecomposedDense):
        h1 = x @ layer.u
        h2 = h1 * layer.s
        return h2 @ layer.v.T + layer.bias, (x, h1, h2)
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0), x
    if isinstance(layer, MaxPool2D):
        return _maxpool_forward(layer, x)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), x.shape
    raise TypeError(f"unsupported layer {type(layer).__name__}")


def layer_backward(layer, cache, gy):
    """Returns ``(grad_input, {param_name: grad})``."""
    if isinstance(layer, Conv2D):
        gx, gw = conv2d_backward(cache, layer.weight, layer.geom, gy)
        return gx, {"weight": gw, "bias": gy.sum(axis=(0, 2, 3))}
    if isinstance(layer, Dense):
        x = cache
        return gy @ layer.weight.T, {"weight": x.T @ gy, "bias": gy.sum(axis=0)}
    if isinstance(layer, DecomposedConv2D):
        return _dconv_backward(layer, cache, gy)
    if isinstance(layer, DecomposedDense):
        x, h1, h2 = cache
        gv = gy.T @ h2
        gh2 = gy @ layer.v
        gs = (gh2 * h1).sum(axis=0)
        gh1 = gh2 * layer.s
        return gh1 @ layer.u.T, {"u": x.T @ gh1, "s": gs, "v": gv, "bias": gy.sum(axis=0)}
    if isinstance(layer, ReLU):
        return gy * (cache > 0), {}
    if isinstance(layer, MaxPool2D):
        return _maxpool_backward(layer, cache, gy)
    if isinstance(layer, Flatten):
        return gy.reshape(cache), {}
    raise TypeError(f"unsupported layer {type(layer).__name__}")


# ---------------------------------------------------------------- model level


def _check_batch(model: Model, batch):
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[1:] != model.input_shape:
        raise ShapeError(
            f"batch shape {batch.shape[1:]} does not match model input {model.input_shape}"
        )
    return batch


def forward(model: Model, batch) -> np.ndarray:
    """Logits ``[N, num_classes]``; decomposed layers run their factor chain."""
    x = _check_batch(model, batch)
    for layer in model.layers:
        x, _ = layer_forward(layer, x)
    return x


def _forward_cached(model, x):
    caches = []
    for i, layer in enumerate(model.layers):
        x, cache = layer_forward(layer, x)
        if not np.all(np.isfinite(x)):
            raise TrainingFault(f"non-finite activation at layer {i} ({type(layer).__name__})")
        caches.append(cache)
    return x, caches


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


# Per-layer gradient dicts, aligned with model.layers (empty for parameterless layers).
GradientSet = list


def _grads_sum(model, x, labels, total):
    """Loss and gradients of the batch-summed loss divided by ``total``."""
    logits, caches = _forward_cached(model, x)
    loss, g = cross_entropy(logits, labels)
    scale = x.shape[0] / total
    loss *= scale
    g *= scale
    grads = [None] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        g, grads[i] = layer_backward(model.layers[i], caches[i], g)
    return loss, grads


def _check_grads(model, grads):
    for i, gd in enumerate(grads):
        for name, g in gd.items():
            if not np.all(np.isfinite(g)):
                raise TrainingFault(
                    f"non-finite gradient for layer {i} ({type(model.layers[i]).__name__}.{name})"
                )


def _check_labels(model, labels, n):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    return labels


def loss_and_grads(model: Model, batch, labels, workers: int = 1, pool=None):
    """Mean cross-entropy over the batch and the gradient of every parameter.

    With ``workers > 1`` the batch is split into contiguous shards whose
    gradients are summed in shard order, so the result depends only on the
    worker count, never on thread scheduling.
    """
    x = _check_batch(model, batch)
    labels = _check_labels(model, labels, x.shape[0])
    n = x.shape[0]
    if workers <= 1 or n < 2:
        loss, grads = _grads_sum(model, x, labels, n)
    else:
        bounds = np.linspace(0, n, min(workers, n) + 1).astype(int)
        shards = [(x[a:b], labels[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
        if pool is None:
            with ThreadPoolExecutor(workers) as ex:
                parts = list(ex.map(lambda s: _grads_sum(model, s[0], s[1], n), shards))
        else:
            parts = list(pool.map(lambda s: _grads_sum(model, s[0], s[1], n), shards))
        loss, grads = parts[0]
        grads = [dict(g) for g in grads]
        for part_loss, part_grads in parts[1:]:
            loss += part_loss
            for acc, g in zip(grads, part_grads):
                for name in acc:
                    acc[name] = acc[name] + g[name]
    if not np.isfinite(loss):
        raise TrainingFault("non-finite loss")
    _check_grads(model, grads)
    return float(loss), grads


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    workers: int = 1
    shuffle: bool = True
    clip_norm: float | None = 5.0
    augment: AugmentConfig | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


class SGD:
    """SGD with momentum and decoupled-from-bias weight decay.

    Step contract shared by any replacement optimizer: ``step(params, grads)``
    receives per-layer ``{name: array}`` dicts and returns new dicts of the same
    shapes; it must not mutate its inputs.
    """

    def __init__(self, lr, momentum=0.9, weight_decay=0.0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = None

    def step(self, params, grads):
        if self._velocity is None:
            self._velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        new = []
        for p, g, vel in zip(params, grads, self._velocity):
            upd = {}
            for name, w in p.items():
                d = g[name]
                if self.weight_decay and name != "bias":
                    d = d + self.weight_decay * w
                vel[name] = self.momentum * vel[name] + d
                upd[name] = w - self.lr * vel[name]
            new.append(upd)
        return new


def _clip(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for gd in grads for g in gd.values()))
    if max_norm is None or total <= max_norm:
        return grads
    scale = max_norm / total
    return [{k: g * scale for k, g in gd.items()} for gd in grads]


def model_params(model: Model):
    return [layer.params() if layer.param_names else {} for layer in model.layers]


def with_params(model: Model, params) -> Model:
    layers = [
        layer.with_params(**p) if p else layer for layer, p in zip(model.layers, params)
    ]
    return model.with_layers(layers)


def _epoch_batch(data: Dataset, idx, cfg: TrainConfig, epoch: int):
    x = data.images[idx]
    if cfg.augment is not None:
        x = np.concatenate(
            [
                augment(x[k : k + 1], cfg.augment, np.random.default_rng([cfg.seed, epoch, int(i)]))
                for k, i in enumerate(idx)
            ]
        )
    return x, data.labels[idx]


def train(model: Model, data: Dataset, cfg: TrainConfig, optimizer=None, frozen=(), on_epoch=None):
    """Minibatch training; returns the trained model and per-epoch mean losses.

    Layers listed in ``frozen`` keep their parameters. Deterministic for a
    fixed ``(model, data, cfg)``: the shuffle of epoch ``e`` comes from
    ``default_rng([seed, e])`` and augmentation of sample ``i`` from
    ``default_rng([seed, e, i])``.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    opt = optimizer or SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    frozen = set(frozen)
    params = [{} if i in frozen else p for i, p in enumerate(model_params(model))]
    history = []
    n = len(data)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(cfg.epochs):
            order = (
                np.random.default_rng([cfg.seed, epoch]).permutation(n)
                if cfg.shuffle
                else np.arange(n)
            )
            total = 0.0
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start : start + cfg.batch_size]
                x, y = _epoch_batch(data, idx, cfg, epoch)
                try:
                    loss, grads = loss_and_grads(model, x, y, cfg.workers, pool)
                except TrainingFault as exc:
                    raise TrainingFault(f"epoch {epoch} batch {b}: {exc}") from None
                grads = _clip([{} if i in frozen else g for i, g in enumerate(grads)], cfg.clip_norm)
                params = opt.step(params, grads)
                model = with_params(model, params)
                total += loss * len(idx)
            history.append(total / n)
            log.debug("epoch %d loss %.6f", epoch, history[-1])
            if on_epoch is not None:
                on_epoch(epoch, history[-1], model)
    finally:
        if pool is not None:
            pool.shutdown()
    return model, history


def predict(model: Model, images, batch_size: int = 256) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest class index."""
    out = []
    for start in range(0, len(images), batch_size):
        out.append(np.argmax(forward(model, images[start : start + batch_size]), axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate_top1(model: Model, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = predict(model, data.images)
    return 100.0 * float(np.mean(pred == data.labels))


# ---------------------------------------------------------------- construction


def init_conv(geom: ConvGeometry, rng) -> Conv2D:
    fan_in = geom.in_ch * geom.kernel_h * geom.kernel_w
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), geom.kernel_shape)
    return Conv2D(geom, w, np.zeros(geom.out_ch))


def init_dense(n_in: int, n_out: int, rng) -> Dense:
    w = rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_out))
    return Dense(n_in, n_out, w, np.zeros(n_out))


def reference_cnn(input_shape=(1, 28, 28), num_classes=10, seed=0, name="reference_cnn") -> Model:
    """conv(C->16,3x3,pad 1)-ReLU-pool-conv(16->32,3x3,pad 1)-ReLU-pool-flatten-
    dense(->128)-ReLU-dense(->classes), He-initialized."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    flat = 32 * (h // 4) * (w // 4)
    layers = [
        init_conv(ConvGeometry(3, 3, c, 16, pad_h=1, pad_w=1), rng),
        ReLU(),
        MaxPool2D(2, 2),
        init_conv(ConvGeometry(3, 3, 16, 32, pad_h=1, pad_w=1), rng),
        ReLU(),
        MaxPool2D(2, 2),
        Flatten(),
        init_dense(flat, 128, rng),
        ReLU(),
        init_dense(128, num_classes, rng),
    ]
    return Model(layers, tuple(input_shape), num_classes, name=name)
