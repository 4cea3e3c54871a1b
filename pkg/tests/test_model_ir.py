import hashlib

import numpy as np
import pytest

from deltarank import checkpoint
from deltarank.checkpoint import CheckpointError
from deltarank.lowrank import decompose_conv, decompose_dense
from deltarank.model_ir import (
    Conv2D,
    DecomposedConv2D,
    DecomposedDense,
    Flatten,
    MaxPool2D,
    Model,
    ReLU,
    count_params,
    infer_shapes,
    optimizable_indices,
    replace_layer,
)
from deltarank.explorer import break_even_rank
from deltarank.tensor_core import ConvGeometry, ShapeError
from helpers import conv, dense, tiny_cnn, tiny_decomposed_cnn
from oracles import count_params_by_walk


def _mnist_like(rng):
    return Model(
        [conv(rng, 3, 3, 1, 8, pad=(1, 1)), MaxPool2D(), Flatten(), dense(rng, 8 * 14 * 14, 10)],
        (1, 28, 28),
        10,
    )


def test_shape_inference_examples():
    m = _mnist_like(np.random.default_rng(0))
    assert infer_shapes(m) == [(8, 28, 28), (8, 14, 14), (1568,), (10,)]


def test_shape_failure_names_the_layer():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError, match=r"layer 1 \(Dense\)"):
        Model([Flatten(), dense(rng, 10, 3)], (1, 4, 4), 3)


def test_wrong_class_count_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError, match="num_classes"):
        Model([Flatten(), dense(rng, 16, 3)], (1, 4, 4), 4)


def test_closed_form_param_counts():
    rng = np.random.default_rng(0)
    c = conv(rng, 3, 3, 64, 128)
    assert c.weight.size == 73_728
    assert c.num_params() == 73_728 + 128
    dc = DecomposedConv2D(
        c.geom, 16,
        np.zeros((16, 1, 1, 3)), np.zeros((16, 1, 3, 1)),
        np.zeros((16, 64, 1, 1)), np.zeros((128, 16, 1, 1)), c.bias,
    )
    assert dc.num_params() - 128 == 3_168
    dd = DecomposedDense(512, 100, 32, np.zeros((512, 32)), np.zeros(32), np.zeros((100, 32)),
                         np.zeros(100))
    assert dd.num_params() == 19_584 + 32 + 100


def test_param_counts_match_attribute_walk():
    for m in (tiny_cnn(), tiny_decomposed_cnn()):
        for layer in m.layers:
            assert layer.num_params() == count_params_by_walk(layer)
        assert count_params(m) == sum(count_params_by_walk(l) for l in m.layers)


def test_factor_shape_mismatch_rejected():
    g = ConvGeometry(3, 3, 2, 4)
    with pytest.raises(ShapeError, match="f3"):
        DecomposedConv2D(g, 2, np.zeros((2, 1, 1, 3)), np.zeros((2, 1, 3, 1)),
                         np.zeros((2, 3, 1, 1)), np.zeros((4, 2, 1, 1)), np.zeros(4))
    with pytest.raises(ShapeError):
        DecomposedDense(4, 3, 4, np.zeros((4, 4)), np.zeros(4), np.zeros((3, 4)), np.zeros(3))


def test_optimizable_indices():
    rng = np.random.default_rng(0)
    m = Model([conv(rng, 3, 3, 1, 2), ReLU(), Flatten(), dense(rng, 8, 2)], (1, 4, 4), 2)
    assert optimizable_indices(m) == [0, 3]
    relus = Model([ReLU(), ReLU()], (3,), 3)
    assert optimizable_indices(relus) == []
    assert optimizable_indices(tiny_decomposed_cnn()) == [5]


def test_replace_layer_contract_and_purity():
    rng = np.random.default_rng(1)
    m = Model([Flatten(), dense(rng, 512, 100)], (2, 16, 16), 100)
    before = checkpoint.to_bytes(m)
    digest = hashlib.sha256(before).hexdigest()
    m2 = replace_layer(m, 1, decompose_dense(m.layers[1], 32))
    assert m2.shapes[-1] == (100,)
    assert hashlib.sha256(checkpoint.to_bytes(m)).hexdigest() == digest
    with pytest.raises(ShapeError):
        replace_layer(m, 1, dense(rng, 512, 99))


def test_replace_conv_with_full_rank_decomposition_keeps_shapes():
    m = tiny_cnn()
    layer = m.layers[0]
    full = decompose_conv(layer, break_even_rank(layer) + 5, restarts=1)
    m2 = replace_layer(m, 0, full)
    assert m2.shapes == m.shapes
    bad = conv(np.random.default_rng(0), 3, 3, 2, 4, pad=(1, 1))
    with pytest.raises(ShapeError):
        replace_layer(m, 0, bad)


def test_decomposition_below_break_even_shrinks_params():
    rng = np.random.default_rng(2)
    m = Model([conv(rng, 3, 3, 8, 16), Flatten(), dense(rng, 16 * 4 * 4, 40)], (8, 6, 6), 40)
    for idx in (0, 2):
        layer = m.layers[idx]
        cap = break_even_rank(layer)
        if isinstance(layer, Conv2D):
            at_cap = decompose_conv(layer, cap, max_iters=2, restarts=1)
            above = decompose_conv(layer, cap + 1, max_iters=2, restarts=1)
        else:
            at_cap, above = decompose_dense(layer, cap), decompose_dense(layer, cap + 1)
        assert count_params(replace_layer(m, idx, at_cap)) < count_params(m)
        assert count_params(replace_layer(m, idx, above)) >= count_params(m)


# ---------------------------------------------------------------- checkpoint


def _f32_exact(model):
    return checkpoint.round_to_f32(model)


@pytest.mark.parametrize("build", [tiny_cnn, tiny_decomposed_cnn])
def test_checkpoint_roundtrip(tmp_path, build):
    m = build().with_norm([0.5, 0.25], [2.0, 4.0])
    path = tmp_path / "m.nltm"
    checkpoint.save(m, path)
    back = checkpoint.load(path)
    assert [type(l) for l in back.layers] == [type(l) for l in m.layers]
    assert back.input_shape == m.input_shape and back.name == m.name
    assert back.norm_mean == m.norm_mean and back.norm_std == m.norm_std
    for a, b in zip(m.layers, back.layers):
        for name in a.param_names:
            np.testing.assert_array_equal(getattr(a, name).astype(np.float32), getattr(b, name))
    # idempotent: saving the loaded model reproduces the file byte for byte
    assert checkpoint.to_bytes(back) == path.read_bytes()


def test_checkpoint_bad_magic():
    data = bytearray(checkpoint.to_bytes(tiny_cnn()))
    data[:4] = b"XXXX"
    with pytest.raises(CheckpointError, match="bad magic"):
        checkpoint.from_bytes(bytes(data))


def test_checkpoint_version_mismatch():
    data = bytearray(checkpoint.to_bytes(tiny_cnn()))
    data[4] = 9
    with pytest.raises(CheckpointError, match="version mismatch"):
        checkpoint.from_bytes(bytes(data))


def test_checkpoint_truncated_blob_names_layer():
    data = checkpoint.to_bytes(tiny_cnn())
    with pytest.raises(CheckpointError, match=r"truncated parameter blob in layer 4 \(Dense"):
        checkpoint.from_bytes(data[:-10])


def test_checkpoint_checksum_failure():
    data = bytearray(checkpoint.to_bytes(tiny_cnn()))
    data[-8] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum failure in layer 4"):
        checkpoint.from_bytes(bytes(data))


def test_checkpoint_trailing_bytes():
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint.from_bytes(checkpoint.to_bytes(tiny_cnn()) + b"\0")


def test_round_to_f32_is_fixed_point():
    m = _f32_exact(tiny_decomposed_cnn())
    assert checkpoint.to_bytes(_f32_exact(m)) == checkpoint.to_bytes(m)
