import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deltarank.data import (
    AugmentConfig,
    DataError,
    Dataset,
    apply_znorm,
    augment,
    load_idx,
    normalize_dataset,
    resize_bilinear,
    split_validation,
    synth_shapes,
    write_idx,
    znorm_stats,
)
from oracles import knn_accuracy


def test_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (5, 4, 3), dtype=np.uint8)
    labels = np.array([0, 1, 2, 1, 0], dtype=np.uint8)
    write_idx(tmp_path / "i", tmp_path / "l", imgs, labels)
    d = load_idx(tmp_path / "i", tmp_path / "l")
    assert d.images.shape == (5, 1, 4, 3)
    assert d.images.min() >= 0.0 and d.images.max() <= 1.0
    np.testing.assert_allclose(d.images[:, 0] * 255.0, imgs)
    np.testing.assert_array_equal(d.labels, labels)
    assert d.num_classes == 3


def test_idx_header_is_big_endian(tmp_path):
    write_idx(tmp_path / "i", tmp_path / "l", np.zeros((2, 3, 4)), [0, 1])
    raw = (tmp_path / "i").read_bytes()
    assert struct.unpack(">4I", raw[:16]) == (0x803, 2, 3, 4)


def test_idx_bad_magic(tmp_path):
    write_idx(tmp_path / "i", tmp_path / "l", np.zeros((2, 3, 4)), [0, 1])
    with pytest.raises(DataError, match="bad magic"):
        load_idx(tmp_path / "l", tmp_path / "l")


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "i", tmp_path / "l", np.zeros((2, 3, 4)), [0, 1])
    write_idx(tmp_path / "i3", tmp_path / "l3", np.zeros((3, 3, 4)), [0, 1, 1])
    with pytest.raises(DataError, match="count mismatch"):
        load_idx(tmp_path / "i", tmp_path / "l3")


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1, 2, 2)), [0], 2)
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 1, 2, 2)), [0, 2], 2)


def test_synth_determinism_and_size():
    a = synth_shapes(20, 4, 16, 3)
    b = synth_shapes(20, 4, 16, 3)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert len(synth_shapes(100, 3, 12, 0)) == 300
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    assert np.bincount(a.labels).tolist() == [20] * 4


def test_synth_rejects_unsupported_classes():
    with pytest.raises(DataError):
        synth_shapes(10, 5, 16, 0)
    with pytest.raises(DataError):
        synth_shapes(10, 2, 8, 0)


def test_synth_is_learnable_by_3nn():
    train = synth_shapes(100, 4, 16, 11)
    test = synth_shapes(50, 4, 16, 12)
    acc = knn_accuracy(train.images, train.labels, test.images, test.labels, k=3)
    assert acc > 0.9


def test_split_is_stratified_and_seeded():
    d = synth_shapes(30, 3, 12, 0)
    tr, va = split_validation(d, 0.1, seed=5)
    assert len(tr) + len(va) == len(d)
    assert np.bincount(va.labels).tolist() == [3, 3, 3]
    tr2, va2 = split_validation(d, 0.1, seed=5)
    np.testing.assert_array_equal(va.images, va2.images)


def test_znorm_train_stats():
    d = synth_shapes(30, 4, 12, 1)
    stats = znorm_stats(d)
    n = normalize_dataset(d, stats)
    assert abs(n.images.mean()) < 1e-9
    assert abs(n.images.std() - 1.0) < 1e-6


def test_znorm_constant_dataset_is_zero():
    d = Dataset(np.full((4, 1, 3, 3), 0.7), [0, 1, 0, 1], 2)
    n = normalize_dataset(d, znorm_stats(d))
    assert not n.images.any()


def test_znorm_uses_train_stats_only():
    train = synth_shapes(30, 4, 12, 1)
    test = Dataset(np.clip(synth_shapes(30, 4, 12, 2).images * 1.3, 0, 1), np.zeros(120, int), 4)
    out = apply_znorm(test.images, znorm_stats(train))
    assert abs(out.mean()) > 1e-3


def test_znorm_empty_rejected():
    with pytest.raises(DataError):
        znorm_stats(Dataset(np.zeros((0, 1, 2, 2)), np.zeros(0, int), 2))


def test_augment_identity_config():
    x = np.random.default_rng(0).random((3, 2, 7, 7))
    y = augment(x, AugmentConfig(crop_fraction=1.0, flip_prob=0.0), np.random.default_rng(1))
    np.testing.assert_array_equal(x, y)


def test_forced_flip_is_an_involution():
    x = np.random.default_rng(0).random((2, 1, 5, 6))
    cfg = AugmentConfig(crop_fraction=1.0, flip_prob=1.0)
    once = augment(x, cfg, np.random.default_rng(1))
    np.testing.assert_array_equal(once, x[..., ::-1])
    np.testing.assert_array_equal(augment(once, cfg, np.random.default_rng(2)), x)


def test_augment_deterministic_given_rng():
    x = np.random.default_rng(0).random((4, 1, 10, 10))
    a = augment(x, AugmentConfig(), np.random.default_rng(3))
    b = augment(x, AugmentConfig(), np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)


def test_resize_hits_corners_exactly():
    img = np.arange(12.0).reshape(3, 4)
    out = resize_bilinear(img, 5, 7)
    assert out[0, 0] == img[0, 0] and out[-1, -1] == img[-1, -1]
    assert out[0, -1] == img[0, -1] and out[-1, 0] == img[-1, 0]


@settings(max_examples=40)
@given(
    h=st.integers(2, 12), w=st.integers(2, 12),
    frac=st.floats(0.3, 1.0), flip=st.floats(0.0, 1.0), seed=st.integers(0, 10**6),
)
def test_augment_shape_and_range(h, w, frac, flip, seed):
    rng = np.random.default_rng(seed)
    x = rng.random((2, 1, h, w))
    cfg = AugmentConfig(crop_fraction=frac, flip_prob=flip)
    if int(np.floor(frac * h)) < 1 or int(np.floor(frac * w)) < 1:
        return
    y = augment(x, cfg, np.random.default_rng(seed + 1))
    assert y.shape == x.shape
    # bilinear interpolation never leaves the source range
    assert y.min() >= x.min() - 1e-12 and y.max() <= x.max() + 1e-12
