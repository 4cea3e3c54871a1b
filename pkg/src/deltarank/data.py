"""Datasets: IDX ingestion, a synthetic shapes generator, z-normalization and
training-time augmentation (random crop + bilinear resize, horizontal flip)."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
STD_FLOOR = 1e-8


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # [N, C, H, W], float64
    labels: np.ndarray  # [N], int64
    num_classes: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise DataError(f"images must be [N,C,H,W], got {images.shape}")
        if len(images) != len(labels):
            raise DataError(f"{len(images)} images but {len(labels)} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


# ---------------------------------------------------------------- IDX


def _read_idx(path, expected_magic, what):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataError(f"{what} file {path} is too short")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataError(f"bad magic in {what} file {path}: 0x{magic:08x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim)
    if body.size != int(np.prod(dims)):
        raise DataError(f"{what} file {path}: header declares {dims}, found {body.size} bytes")
    return body.reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an MNIST-style IDX image/label pair; pixels scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if len(images) != len(labels):
        raise DataError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(x, labels.astype(np.int64), k)


def write_idx(images_path, labels_path, images_u8, labels_u8) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    n, h, w = images_u8.shape
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, n, h, w) + images_u8.tobytes())
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels_u8)) + labels_u8.tobytes())


# ---------------------------------------------------------------- synthetic shapes

SHAPE_NAMES = ("square", "circle", "cross", "stripes")


def _render(kind: int, hw: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    cy, cx = hw / 2 - 0.5 + rng.uniform(-hw / 12, hw / 12, size=2)
    size = hw * rng.uniform(0.2, 0.32)
    # stroke widths scale with the shape so a zoomed crop stays in-distribution
    stroke = max(0.6, 0.18 * size)
    level = rng.uniform(0.7, 1.0)
    if kind == 0:
        mask = (np.abs(yy - cy) <= size) & (np.abs(xx - cx) <= size)
    elif kind == 1:
        d = np.hypot(yy - cy, xx - cx)
        mask = np.abs(d - size) <= stroke
    elif kind == 2:
        arm = stroke
        mask = ((np.abs(yy - cy) <= arm) & (np.abs(xx - cx) <= size * 1.2)) | (
            (np.abs(xx - cx) <= arm) & (np.abs(yy - cy) <= size * 1.2)
        )
    else:
        period = rng.uniform(3.0, 6.0)
        mask = np.sin(2 * np.pi * (yy + rng.uniform(0, period)) / period) > 0
    return level * mask


def synth_shapes(n_per_class: int, num_classes: int, hw: int, seed: int) -> Dataset:
    """Balanced single-channel dataset of jittered shape renderings.

    Class k is ``SHAPE_NAMES[k]``; every image gets additive Gaussian noise
    (sigma 0.05) and is clipped to [0, 1]. Fully determined by the arguments.
    """
    if not 1 <= num_classes <= len(SHAPE_NAMES):
        raise DataError(f"num_classes must be in 1..{len(SHAPE_NAMES)}, got {num_classes}")
    if hw < 12:
        raise DataError(f"hw must be >= 12, got {hw}")
    rng = np.random.default_rng(seed)
    n = n_per_class * num_classes
    labels = np.repeat(np.arange(num_classes), n_per_class)
    images = np.empty((n, 1, hw, hw))
    for i, k in enumerate(labels):
        images[i, 0] = _render(int(k), hw, rng)
    images += rng.normal(0.0, 0.05, images.shape)
    np.clip(images, 0.0, 1.0, out=images)
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], num_classes)


def split_validation(data: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded stratified split into (train, validation)."""
    rng = np.random.default_rng([seed, 0x5A11])
    val = []
    for k in range(data.num_classes):
        idx = np.flatnonzero(data.labels == k)
        take = int(round(fraction * len(idx)))
        val.extend(rng.permutation(idx)[:take].tolist())
    val = np.sort(np.array(val, dtype=np.int64))
    mask = np.ones(len(data), dtype=bool)
    mask[val] = False
    return data.subset(np.flatnonzero(mask)), data.subset(val)


# ---------------------------------------------------------------- normalization


def znorm_stats(train: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std (floored at 1e-8) of the training images."""
    if len(train) == 0:
        raise DataError("cannot compute normalization stats of an empty dataset")
    # shift by one sample per channel so a constant channel gets its exact value
    shift = train.images[0, :, 0, 0]
    centered = train.images - shift[None, :, None, None]
    mean = shift + centered.mean(axis=(0, 2, 3))
    std = np.maximum(centered.std(axis=(0, 2, 3)), STD_FLOOR)
    return mean, std


def apply_znorm(batch: np.ndarray, stats) -> np.ndarray:
    mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    return (batch - mean[None, :, None, None]) / std[None, :, None, None]


def normalize_dataset(data: Dataset, stats) -> Dataset:
    return Dataset(apply_znorm(data.images, stats), data.labels, data.num_classes)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    crop_fraction: float = 0.8
    flip_prob: float = 0.5

    def __post_init__(self):
        if not 0 < self.crop_fraction <= 1:
            raise ValueError("crop_fraction must be in (0, 1]")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must be in [0, 1]")


def _resize_axis(n_src: int, n_dst: int):
    """Align-corners bilinear sample positions: (lo, hi, frac) per output index."""
    if n_dst == 1 or n_src == 1:
        pos = np.zeros(n_dst)
    else:
        pos = np.arange(n_dst) * (n_src - 1) / (n_dst - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, pos - lo


def resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of ``[..., H, W]`` to ``[..., h, w]``."""
    ylo, yhi, fy = _resize_axis(img.shape[-2], h)
    xlo, xhi, fx = _resize_axis(img.shape[-1], w)
    rows = img[..., ylo, :] * (1 - fy)[:, None] + img[..., yhi, :] * fy[:, None]
    return rows[..., xlo] * (1 - fx) + rows[..., xhi] * fx


def augment(batch: np.ndarray, cfg: AugmentConfig, rng) -> np.ndarray:
    """Random crop of ``crop_fraction``, resize back, random horizontal flip.

    Parameters are drawn per sample, in batch order, from ``rng``.
    """
    n, c, h, w = batch.shape
    ch, cw = int(np.floor(cfg.crop_fraction * h)), int(np.floor(cfg.crop_fraction * w))
    if ch < 1 or cw < 1:
        raise ValueError(f"crop of {cfg.crop_fraction} leaves an empty image")
    out = np.empty_like(batch, dtype=np.float64)
    for i in range(n):
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        flip = rng.random() < cfg.flip_prob
        img = batch[i, :, top : top + ch, left : left + cw]
        if (ch, cw) != (h, w):
            img = resize_bilinear(img, h, w)
        out[i] = img[..., ::-1] if flip else img
    return out
