import numpy as np
import pytest

from deltarank.config import ComposedList, OptimizationConfig
from deltarank.data import normalize_dataset, split_validation, synth_shapes, znorm_stats
from deltarank.explorer import (
    Factorizer,
    FineTuner,
    backoff,
    break_even_rank,
    initial_ranks,
    rank_cap,
    stage1,
)
from deltarank.lowrank import ALSFailure
from deltarank.model_ir import Conv2D, Dense, Flatten, Model, count_params
from deltarank.runtime import TrainConfig, evaluate_top1, train
from helpers import ScriptedTuner, conv, dense, small_model
from oracles import cp_tensor


def test_break_even_examples():
    rng = np.random.default_rng(0)
    assert break_even_rank(conv(rng, 3, 3, 64, 128)) == 372
    assert break_even_rank(dense(rng, 512, 100)) == 83
    assert break_even_rank(conv(rng, 1, 1, 1, 1)) == 0


def test_dense_cap_respects_structural_rank():
    layer = dense(np.random.default_rng(0), 200, 3)
    assert break_even_rank(layer) == 2
    assert rank_cap(dense(np.random.default_rng(0), 40, 30)) == 16
    assert rank_cap(dense(np.random.default_rng(0), 1000, 2)) == 1


def _selected(model, *indices):
    return ComposedList(tuple(indices), (1,) * len(indices))


def test_exact_rank_two_dense():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((40, 2)) @ rng.standard_normal((2, 30))
    m = Model([Flatten(), Dense(40, 30, w, np.zeros(30))], (1, 1, 40), 30)
    assert initial_ranks(m, _selected(m, 1), 0.05) == {1: 2}


def test_constructed_cp_rank_four_conv():
    rng = np.random.default_rng(2)
    k, _ = cp_tensor(rng, (16, 8, 3, 3), 4)
    c = conv(rng, 3, 3, 8, 16)
    m = Model([Conv2D(c.geom, k, c.bias), Flatten(), dense(rng, 16 * 9 * 9, 4)], (8, 11, 11), 4)
    assert initial_ranks(m, _selected(m, 0), 0.05) == {0: 4}


def test_zero_tolerance_gives_cap():
    rng = np.random.default_rng(3)
    m = Model([conv(rng, 3, 3, 2, 6), Flatten(), dense(rng, 6 * 4 * 4, 30)], (2, 6, 6), 30)
    r = initial_ranks(m, _selected(m, 0, 2), 0.0)
    assert r == {0: rank_cap(m.layers[0]), 2: rank_cap(m.layers[2])}


def test_als_failure_names_the_layer():
    rng = np.random.default_rng(4)
    c = conv(rng, 3, 3, 2, 6)
    m = Model([Conv2D(c.geom, np.full(c.weight.shape, np.nan), c.bias), Flatten(), dense(rng, 96, 3)],
              (2, 6, 6), 3)
    with pytest.raises(ALSFailure, match=r"layer 0 \(Conv2D\)"):
        initial_ranks(m, _selected(m, 0), 0.05)


def test_backoff_worst_quarter_grows():
    ranks = {0: 4, 1: 3, 2: 5, 3: 2, 4: 7}
    fits = {0: 0.5, 1: 0.4, 2: 0.1, 3: 0.05, 4: 0.2}
    caps = {0: 10, 1: 10, 2: 10, 3: 10, 4: 10}
    new, dropped = backoff(ranks, fits, caps)
    assert dropped == []
    assert new == {0: 6, 1: 5, 2: 5, 3: 2, 4: 7}


def test_backoff_caps_and_drops():
    ranks = {0: 5, 1: 10}
    fits = {0: 0.3, 1: 0.9}
    new, dropped = backoff(ranks, fits, {0: 6, 1: 10})
    assert dropped == [1] and new == {0: 5}
    new, dropped = backoff({0: 5}, {0: 0.3}, {0: 6})
    assert new == {0: 6} and dropped == []


def _cfg(**kw):
    base = dict(min_layer_params=0, als_max_iters=20, als_restarts=1, backoff_rounds=4)
    base.update(kw)
    return OptimizationConfig(**base)


def test_empty_composed_list_returns_input():
    m = small_model()
    cl = ComposedList((0, 4), (0, 0))
    res = stage1(m, cl, _cfg(), 80.0, ScriptedTuner(lambda _: 0.0))
    assert res.model is m and res.delta_met and res.val_accuracy == 80.0


def test_vacuous_delta_single_round():
    m = small_model()
    tuner = ScriptedTuner(lambda _: 0.0)
    res = stage1(m, _selected(m, 0, 4), _cfg(delta=100.0), 90.0, tuner)
    assert len(res.state.history) == 1 and tuner.calls == 1
    assert res.delta_met and count_params(res.model) < count_params(m)


def test_infeasible_rounds_back_off_to_dense():
    m = small_model()
    cfg = _cfg(delta=1.0, epsilon1=0.6)

    def run():
        return stage1(m, _selected(m, 0, 4), cfg, 90.0, ScriptedTuner(lambda _: 50.0))

    res = run()
    hist = res.state.history
    assert len(hist) > 1
    # every layer eventually hits its cap and reverts to dense, which is trivially feasible
    assert hist[-1]["ranks"] == {} and res.model is m and res.delta_met
    assert not any(h["passed"] for h in hist[:-1])
    for a, b in zip(hist, hist[1:]):
        for layer, r in b["ranks"].items():
            assert r >= a["ranks"][layer]
    assert all(h["params"] <= count_params(m) for h in hist)
    again = run().state.history
    assert again == hist


def test_exactly_low_rank_model_passes_first_round():
    data = synth_shapes(40, 4, 12, 0)
    stats = znorm_stats(data)
    data = normalize_dataset(data, stats)
    m, _ = train(small_model(), data, TrainConfig(epochs=3, lr=0.02, seed=0))
    # project the classifier onto rank 2 so the factorization is exact
    d = m.layers[4]
    u, s, vt = np.linalg.svd(d.weight, full_matrices=False)
    w2 = (u[:, :2] * s[:2]) @ vt[:2]
    m = m.with_layers(list(m.layers[:4]) + [Dense(d.in_features, d.out_features, w2, d.bias)])
    tr, va = split_validation(data, 0.25, 0)
    base = evaluate_top1(m, va)
    cfg = _cfg(delta=0.0, lr=1e-9, momentum=0.0, weight_decay=0.0, finetune_epochs_stage1=1)
    cl = ComposedList((0, 4), (0, 1))
    res = stage1(m, cl, cfg, base, FineTuner(tr, va, cfg, frozen=cl.frozen()))
    assert res.state.ranks == {4: 2}
    assert len(res.state.history) == 1 and res.delta_met
    assert abs(res.val_accuracy - base) < 1e-9


def test_factorizer_is_order_deterministic():
    m = small_model()
    a = Factorizer(m).layer(0, 3)
    b = Factorizer(m).layer(0, 3)
    np.testing.assert_array_equal(a.f1, b.f1)
    np.testing.assert_array_equal(a.f4, b.f4)


def test_exhausted_rounds_flag_infeasible():
    m = small_model()
    res = stage1(m, _selected(m, 0, 4), _cfg(backoff_rounds=1, epsilon1=0.6), 90.0,
                 ScriptedTuner(lambda _: 50.0))
    assert len(res.state.history) == 2 and not res.delta_met
    # the best infeasible candidate is the smallest one
    assert res.state.best_params == min(h["params"] for h in res.state.history)
