"""Dense float64 tensors and the numeric kernels the rest of the package uses.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 with rank 1..4,
flagged read-only once they enter a layer. Convolutions are cross-correlations
(no kernel flip), NCHW layout, kernels laid out ``[out, in, kh, kw]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised for incompatible tensor shapes or geometry."""


def as_tensor(x, *, copy: bool = True) -> np.ndarray:
    """Return ``x`` as a read-only float64 array of rank 1..4."""
    arr = np.array(x, dtype=np.float64, copy=copy)
    if arr.ndim < 1 or arr.ndim > 4:
        raise ShapeError(f"tensor rank must be 1..4, got {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ConvGeometry:
    kernel_h: int
    kernel_w: int
    in_ch: int
    out_ch: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.in_ch, self.out_ch) < 1:
            raise ShapeError(f"kernel and channel extents must be >= 1: {self}")
        if self.stride_h < 1 or self.stride_w < 1:
            raise ShapeError(f"strides must be >= 1: {self}")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ShapeError(f"padding must be >= 0: {self}")

    @property
    def kernel_shape(self) -> tuple[int, int, int, int]:
        return (self.out_ch, self.in_ch, self.kernel_h, self.kernel_w)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return (
            out_extent(h, self.kernel_h, self.stride_h, self.pad_h),
            out_extent(w, self.kernel_w, self.stride_w, self.pad_w),
        )


def out_extent(size: int, k: int, stride: int, pad: int) -> int:
    """Output extent of a sliding window; fractional geometry is an error."""
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"window {k} larger than padded extent {size + 2 * pad}")
    if span % stride:
        raise ShapeError(
            f"non-integral output extent: ({size} + 2*{pad} - {k})/{stride} + 1"
        )
    return span // stride + 1


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _window(xp: np.ndarray, i: int, j: int, oh: int, ow: int, sh: int, sw: int):
    return xp[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw]


def _check_conv(x: np.ndarray, kernel: np.ndarray, geom: ConvGeometry):
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [N,C,H,W], got shape {x.shape}")
    if kernel.shape != geom.kernel_shape:
        raise ShapeError(
            f"kernel shape {kernel.shape} does not match geometry {geom.kernel_shape}"
        )
    if x.shape[1] != geom.in_ch:
        raise ShapeError(
            f"input has {x.shape[1]} channels, geometry expects {geom.in_ch}"
        )
    return geom.output_hw(x.shape[2], x.shape[3])


def conv2d(x: np.ndarray, kernel: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Direct zero-padded cross-correlation, no bias.

    Accumulates one channel contraction per kernel offset; the im2col matrix
    is never built.
    """
    oh, ow = _check_conv(x, kernel, geom)
    n = x.shape[0]
    xp = _pad(x, geom.pad_h, geom.pad_w)
    acc = np.zeros((geom.out_ch, n, oh, ow))
    for i in range(geom.kernel_h):
        for j in range(geom.kernel_w):
            win = _window(xp, i, j, oh, ow, geom.stride_h, geom.stride_w)
            acc += np.tensordot(kernel[:, :, i, j], win, axes=([1], [1]))
    return np.ascontiguousarray(acc.transpose(1, 0, 2, 3))


def conv2d_backward(
    x: np.ndarray, kernel: np.ndarray, geom: ConvGeometry, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``conv2d`` w.r.t. its input and kernel."""
    oh, ow = _check_conv(x, kernel, geom)
    xp = _pad(x, geom.pad_h, geom.pad_w)
    gxp = np.zeros_like(xp)
    gk = np.empty(kernel.shape)
    sh, sw = geom.stride_h, geom.stride_w
    for i in range(geom.kernel_h):
        for j in range(geom.kernel_w):
            win = _window(xp, i, j, oh, ow, sh, sw)
            gk[:, :, i, j] = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
            # [N,O,H,W] x [O,C] -> [N,H,W,C]
            contrib = np.tensordot(grad_out, kernel[:, :, i, j], axes=([1], [0]))
            gxp[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += (
                contrib.transpose(0, 3, 1, 2)
            )
    gx = gxp[:, :, geom.pad_h : geom.pad_h + x.shape[2], geom.pad_w : geom.pad_w + x.shape[3]]
    return np.ascontiguousarray(gx), gk


def _check_depthwise(x, kernel, stride, pad):
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[1] != 1:
        raise ShapeError(
            f"depthwise conv expects [N,C,H,W] input and [C,1,kh,kw] kernel, "
            f"got {x.shape} and {kernel.shape}"
        )
    if kernel.shape[0] != x.shape[1]:
        raise ShapeError(
            f"depthwise kernel has {kernel.shape[0]} channels, input has {x.shape[1]}"
        )
    kh, kw = kernel.shape[2:]
    return (
        out_extent(x.shape[2], kh, stride[0], pad[0]),
        out_extent(x.shape[3], kw, stride[1], pad[1]),
    )


def depthwise_conv2d(
    x: np.ndarray, kernel: np.ndarray, stride=(1, 1), pad=(0, 0)
) -> np.ndarray:
    """Per-channel cross-correlation with a ``[C,1,kh,kw]`` kernel."""
    oh, ow = _check_depthwise(x, kernel, stride, pad)
    xp = _pad(x, *pad)
    out = np.zeros((x.shape[0], x.shape[1], oh, ow))
    for i in range(kernel.shape[2]):
        for j in range(kernel.shape[3]):
            win = _window(xp, i, j, oh, ow, *stride)
            out += win * kernel[:, 0, i, j][None, :, None, None]
    return out


def depthwise_conv2d_backward(x, kernel, grad_out, stride=(1, 1), pad=(0, 0)):
    oh, ow = _check_depthwise(x, kernel, stride, pad)
    sh, sw = stride
    xp = _pad(x, *pad)
    gxp = np.zeros_like(xp)
    gk = np.empty(kernel.shape)
    for i in range(kernel.shape[2]):
        for j in range(kernel.shape[3]):
            win = _window(xp, i, j, oh, ow, sh, sw)
            gk[:, 0, i, j] = np.einsum("nchw,nchw->c", grad_out, win)
            gxp[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += (
                grad_out * kernel[:, 0, i, j][None, :, None, None]
            )
    gx = gxp[:, :, pad[0] : pad[0] + x.shape[2], pad[1] : pad[1] + x.shape[3]]
    return np.ascontiguousarray(gx), gk


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization.

    Row index is the ``mode`` axis; columns enumerate the remaining axes in
    ascending axis order, row-major (last remaining axis varies fastest).
    """
    if not 0 <= mode < t.ndim:
        raise ShapeError(f"mode {mode} out of range for rank-{t.ndim} tensor")
    return np.moveaxis(t, mode, 0).reshape(t.shape[mode], -1)


def fold(m: np.ndarray, mode: int, shape) -> np.ndarray:
    """Inverse of :func:`unfold`."""
    shape = tuple(shape)
    if not 0 <= mode < len(shape):
        raise ShapeError(f"mode {mode} out of range for shape {shape}")
    rest = shape[:mode] + shape[mode + 1 :]
    return np.moveaxis(m.reshape((shape[mode],) + rest), 0, mode)
