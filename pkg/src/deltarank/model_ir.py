"""Sequential layer graph: layer variants, shape inference, parameter counts."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .tensor_core import ConvGeometry, ShapeError, as_tensor, out_extent


def _expect(name, arr, shape):
    if arr.shape != tuple(shape):
        raise ShapeError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")


class _Parametric:
    """Mixin for layers carrying trainable tensors in ``param_names`` order."""

    param_names: tuple[str, ...] = ()

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.param_names}

    def with_params(self, **arrays):
        return dataclasses.replace(self, **arrays)

    def num_params(self) -> int:
        return sum(getattr(self, n).size for n in self.param_names)


@dataclass(frozen=True, eq=False)
class Conv2D(_Parametric):
    geom: ConvGeometry
    weight: np.ndarray
    bias: np.ndarray
    param_names = ("weight", "bias")

    def __post_init__(self):
        object.__setattr__(self, "weight", as_tensor(self.weight))
        object.__setattr__(self, "bias", as_tensor(self.bias))
        _expect("Conv2D.weight", self.weight, self.geom.kernel_shape)
        _expect("Conv2D.bias", self.bias, (self.geom.out_ch,))

    def output_shape(self, shape):
        c, h, w = _chw(shape, self)
        if c != self.geom.in_ch:
            raise ShapeError(f"expects {self.geom.in_ch} input channels, got {c}")
        return (self.geom.out_ch, *self.geom.output_hw(h, w))

    @property
    def weight_count(self) -> int:
        return self.weight.size


@dataclass(frozen=True, eq=False)
class Dense(_Parametric):
    in_features: int
    out_features: int
    weight: np.ndarray  # [in, out]
    bias: np.ndarray
    param_names = ("weight", "bias")

    def __post_init__(self):
        object.__setattr__(self, "weight", as_tensor(self.weight))
        object.__setattr__(self, "bias", as_tensor(self.bias))
        _expect("Dense.weight", self.weight, (self.in_features, self.out_features))
        _expect("Dense.bias", self.bias, (self.out_features,))

    def output_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise ShapeError(f"expects input ({self.in_features},), got {tuple(shape)}")
        return (self.out_features,)

    @property
    def weight_count(self) -> int:
        return self.weight.size


@dataclass(frozen=True, eq=False)
class DecomposedConv2D(_Parametric):
    """Rank-``rank`` CP-factorized convolution.

    Executed as pointwise ``f3`` (in -> r), vertical depthwise ``f2`` (kh x 1,
    carries stride_h/pad_h), horizontal depthwise ``f1`` (1 x kw, carries
    stride_w/pad_w), pointwise ``f4`` (r -> out), then bias.
    """

    geom: ConvGeometry
    rank: int
    f1: np.ndarray  # [r, 1, 1, kw]
    f2: np.ndarray  # [r, 1, kh, 1]
    f3: np.ndarray  # [r, in, 1, 1]
    f4: np.ndarray  # [out, r, 1, 1]
    bias: np.ndarray
    param_names = ("f1", "f2", "f3", "f4", "bias")

    def __post_init__(self):
        if self.rank < 1:
            raise ShapeError(f"rank must be >= 1, got {self.rank}")
        g, r = self.geom, self.rank
        for name, shape in (
            ("f1", (r, 1, 1, g.kernel_w)),
            ("f2", (r, 1, g.kernel_h, 1)),
            ("f3", (r, g.in_ch, 1, 1)),
            ("f4", (g.out_ch, r, 1, 1)),
            ("bias", (g.out_ch,)),
        ):
            object.__setattr__(self, name, as_tensor(getattr(self, name)))
            _expect(f"DecomposedConv2D.{name}", getattr(self, name), shape)

    def output_shape(self, shape):
        c, h, w = _chw(shape, self)
        if c != self.geom.in_ch:
            raise ShapeError(f"expects {self.geom.in_ch} input channels, got {c}")
        return (self.geom.out_ch, *self.geom.output_hw(h, w))

    def kernel(self) -> np.ndarray:
        """Dense ``[out, in, kh, kw]`` kernel the factors represent."""
        return np.einsum(
            "or,rc,rh,rw->ochw",
            self.f4[:, :, 0, 0],
            self.f3[:, :, 0, 0],
            self.f2[:, 0, :, 0],
            self.f1[:, 0, 0, :],
        )


@dataclass(frozen=True, eq=False)
class DecomposedDense(_Parametric):
    """``y = ((x @ u) * s) @ v.T + bias``; ``u`` is [in, r], ``v`` is [out, r]."""

    in_features: int
    out_features: int
    rank: int
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray
    bias: np.ndarray
    param_names = ("u", "s", "v", "bias")

    def __post_init__(self):
        if not 1 <= self.rank <= min(self.in_features, self.out_features):
            raise ShapeError(
                f"rank {self.rank} outside [1, {min(self.in_features, self.out_features)}]"
            )
        for name, shape in (
            ("u", (self.in_features, self.rank)),
            ("s", (self.rank,)),
            ("v", (self.out_features, self.rank)),
            ("bias", (self.out_features,)),
        ):
            object.__setattr__(self, name, as_tensor(getattr(self, name)))
            _expect(f"DecomposedDense.{name}", getattr(self, name), shape)

    def output_shape(self, shape):
        if tuple(shape) != (self.in_features,):
            raise ShapeError(f"expects input ({self.in_features},), got {tuple(shape)}")
        return (self.out_features,)

    def matrix(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


@dataclass(frozen=True)
class ReLU:
    param_names = ()

    def output_shape(self, shape):
        return tuple(shape)

    def num_params(self):
        return 0


@dataclass(frozen=True)
class MaxPool2D:
    k: int = 2
    stride: int = 2
    param_names = ()

    def output_shape(self, shape):
        c, h, w = _chw(shape, self)
        return (c, out_extent(h, self.k, self.stride, 0), out_extent(w, self.k, self.stride, 0))

    def num_params(self):
        return 0


@dataclass(frozen=True)
class Flatten:
    param_names = ()

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def num_params(self):
        return 0


LAYER_TYPES = {
    cls.__name__: cls
    for cls in (Conv2D, Dense, DecomposedConv2D, DecomposedDense, ReLU, MaxPool2D, Flatten)
}


def _chw(shape, layer):
    if len(shape) != 3:
        raise ShapeError(f"{type(layer).__name__} needs a [C,H,W] input, got {tuple(shape)}")
    return shape


@dataclass(frozen=True, eq=False)
class Model:
    layers: tuple
    input_shape: tuple[int, int, int]
    num_classes: int
    name: str = "model"
    # per-channel z-normalization stats of the training data, if recorded
    norm_mean: tuple[float, ...] | None = None
    norm_std: tuple[float, ...] | None = None
    shapes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        shapes = _infer(self.layers, self.input_shape)
        final = shapes[-1] if shapes else self.input_shape
        if final != (self.num_classes,):
            raise ShapeError(
                f"model output shape {final} does not match num_classes={self.num_classes}"
            )
        object.__setattr__(self, "shapes", tuple(shapes))

    def with_layers(self, layers) -> "Model":
        return dataclasses.replace(self, layers=tuple(layers))

    def with_norm(self, mean, std) -> "Model":
        return dataclasses.replace(
            self, norm_mean=tuple(float(m) for m in mean), norm_std=tuple(float(s) for s in std)
        )


def _infer(layers, input_shape):
    shapes = []
    cur = tuple(input_shape)
    for i, layer in enumerate(layers):
        try:
            cur = tuple(int(d) for d in layer.output_shape(cur))
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({type(layer).__name__}): {exc}") from None
        shapes.append(cur)
    return shapes


def infer_shapes(model: Model) -> list[tuple[int, ...]]:
    """Per-layer output shapes (batch axis omitted)."""
    return list(model.shapes)


def layer_input_shape(model: Model, index: int) -> tuple[int, ...]:
    return model.input_shape if index == 0 else model.shapes[index - 1]


def count_params(model: Model) -> int:
    return sum(layer.num_params() for layer in model.layers)


def optimizable_indices(model: Model) -> list[int]:
    """Indices of dense ``Conv2D``/``Dense`` layers (decomposed ones are excluded)."""
    return [i for i, l in enumerate(model.layers) if isinstance(l, (Conv2D, Dense))]


def replace_layer(model: Model, index: int, new) -> Model:
    if not 0 <= index < len(model.layers):
        raise IndexError(f"layer index {index} out of range")
    in_shape = layer_input_shape(model, index)
    try:
        got = tuple(new.output_shape(in_shape))
    except ShapeError as exc:
        raise ShapeError(f"replacement for layer {index} rejects input {in_shape}: {exc}") from None
    if got != model.shapes[index]:
        raise ShapeError(
            f"replacement for layer {index} outputs {got}, expected {model.shapes[index]}"
        )
    layers = list(model.layers)
    layers[index] = new
    return model.with_layers(layers)
