"""Stage 1: reconstruction-threshold rank choice, decomposition, fine-tuning
and worst-fit-first rank backoff until the accuracy constraint holds."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .lowrank import (
    ALSFailure,
    FactorSet,
    conv_from_factors,
    cp_als,
    dense_from_factors,
    rel_error,
    svd,
)
from .config import check_termination
from .model_ir import Conv2D, Dense, Model, count_params
from .runtime import TrainConfig, evaluate_top1, train

log = logging.getLogger(__name__)


def break_even_rank(layer) -> int:
    """Largest rank whose factorization has fewer weights than ``layer``.

    Dense layers count the r singular values; biases cancel out.
    """
    if isinstance(layer, Conv2D):
        g = layer.geom
        return (layer.weight.size - 1) // (g.kernel_w + g.kernel_h + g.in_ch + g.out_ch)
    if isinstance(layer, Dense):
        return (layer.weight.size - 1) // (layer.in_features + layer.out_features + 1)
    raise TypeError(f"{type(layer).__name__} has no break-even rank")


def rank_cap(layer) -> int:
    cap = break_even_rank(layer)
    if isinstance(layer, Dense):
        cap = min(cap, layer.in_features, layer.out_features)
    return cap


@dataclass(frozen=True)
class ALSOptions:
    max_iters: int = 200
    tol: float = 1e-7
    restarts: int = 3
    seed: int = 0


class Factorizer:
    """Memoized factorizations of the layers of one (original) model.

    Dense layers keep one full SVD and slice it per rank. Conv factorizations
    are cached per ``(layer, rank)``; the first request for a rank decides its
    factors, so a fixed request order gives fixed results.
    """

    def __init__(self, model: Model, als: ALSOptions = ALSOptions()):
        self.model = model
        self.als = als
        self._svd = {}
        self._cp = {}

    def dense_spectrum(self, index: int):
        if index not in self._svd:
            self._svd[index] = svd(self.model.layers[index].weight)
        return self._svd[index]

    def factors(self, index: int, r: int, init: FactorSet | None = None) -> FactorSet:
        layer = self.model.layers[index]
        if isinstance(layer, Dense):
            u, s, v = self.dense_spectrum(index)
            fs = FactorSet("dense", (u[:, :r].copy(), s[:r].copy(), v[:, :r].copy()), 0.0)
            fs.fit = rel_error(layer.weight, fs) if np.any(layer.weight) else 0.0
            return fs
        key = (index, r)
        if key not in self._cp:
            o = self.als
            try:
                self._cp[key] = cp_als(
                    layer.weight, r, max_iters=o.max_iters, tol=o.tol,
                    restarts=o.restarts, seed=o.seed + index, init=init,
                )
            except ALSFailure as exc:
                raise ALSFailure(f"layer {index} ({type(layer).__name__}) rank {r}: {exc}") from exc
        return self._cp[key]

    def fit(self, index: int, r: int) -> float:
        return self.factors(index, r).fit

    def layer(self, index: int, r: int):
        original = self.model.layers[index]
        fs = self.factors(index, r)
        if isinstance(original, Dense):
            return dense_from_factors(original, fs)
        return conv_from_factors(original, fs)

    def build(self, ranks: dict) -> Model:
        layers = list(self.model.layers)
        for index, r in sorted(ranks.items()):
            layers[index] = self.layer(index, r)
        return self.model.with_layers(layers)


def _dense_initial_rank(fac: Factorizer, index: int, epsilon: float, cap: int) -> int:
    _, s, _ = fac.dense_spectrum(index)
    energy = s**2
    total = energy.sum()
    if total == 0:
        return 1
    # tail[r] = energy beyond the first r singular values
    tail = np.concatenate([np.cumsum(energy[::-1])[::-1], [0.0]]) / total
    for r in range(1, len(s) + 1):
        if tail[r] <= epsilon**2:
            return min(r, cap)
    return cap


def _conv_initial_rank(fac: Factorizer, index: int, epsilon: float, cap: int) -> int:
    if epsilon <= 0:
        return cap
    prev, prev_r, g = None, 0, 1
    while True:
        r = min(g, cap)
        fs = fac.factors(index, r, init=prev)
        if fs.fit <= epsilon:
            break
        if r == cap:
            return cap
        prev, prev_r, g = fs, r, 2 * g
    lo, lo_fs, hi = prev_r, prev, r
    while hi - lo > 1:
        mid = (lo + hi) // 2
        fs = fac.factors(index, mid, init=lo_fs)
        if fs.fit <= epsilon:
            hi = mid
        else:
            lo, lo_fs = mid, fs
    return hi


def initial_ranks(model: Model, composed, epsilon1: float, fac: Factorizer | None = None) -> dict:
    """Smallest rank per selected layer whose reconstruction error is within
    ``epsilon1`` (dense: singular-value tail energy <= epsilon1**2; conv: CP
    fit on the grid 1, 2, 4, ... then bisection), capped at break-even."""
    fac = fac or Factorizer(model)
    ranks = {}
    for index in composed.selected():
        layer = model.layers[index]
        cap = rank_cap(layer)
        if isinstance(layer, Dense):
            ranks[index] = _dense_initial_rank(fac, index, epsilon1, cap)
        else:
            ranks[index] = _conv_initial_rank(fac, index, epsilon1, cap)
    return ranks


@dataclass
class ExplorationState:
    ranks: dict
    round: int = 0
    fits: dict = field(default_factory=dict)
    best_model: Model | None = None
    best_val_accuracy: float | None = None
    best_params: int | None = None
    best_ranks: dict = field(default_factory=dict)
    feasible: bool = False
    history: list = field(default_factory=list)


def backoff(ranks: dict, fits: dict, caps: dict) -> tuple[dict, list]:
    """Raise the ranks of the ceil(25%) worst-fit layers by 1.5x.

    A layer already at its cap is dropped from the assignment (restored dense).
    Returns the new assignment and the dropped layer indices.
    """
    ranks = dict(ranks)
    n_up = math.ceil(0.25 * len(ranks))
    worst = sorted(ranks, key=lambda i: (-fits[i], i))[:n_up]
    dropped = []
    for i in worst:
        if ranks[i] >= caps[i]:
            del ranks[i]
            dropped.append(i)
        else:
            ranks[i] = min(math.ceil(1.5 * ranks[i]), caps[i])
    return ranks, dropped


class FineTuner:
    """Fine-tunes candidates on the search split and scores them on validation."""

    def __init__(self, train_data, val_data, cfg, frozen=()):
        from .data import AugmentConfig

        self.train_data = train_data
        self.val_data = val_data
        self.cfg = cfg
        self.frozen = tuple(frozen)
        self.augment = AugmentConfig(cfg.crop_fraction, cfg.flip_prob) if cfg.augment else None

    def tune(self, model: Model, epochs: int, *key: int) -> Model:
        seed = int(np.random.SeedSequence([self.cfg.seed, *key]).generate_state(1)[0])
        tc = TrainConfig(
            epochs=epochs,
            batch_size=self.cfg.batch_size,
            lr=self.cfg.lr,
            momentum=self.cfg.momentum,
            weight_decay=self.cfg.weight_decay,
            seed=seed,
            workers=self.cfg.workers,
            augment=self.augment,
        )
        tuned, _ = train(model, self.train_data, tc, frozen=self.frozen)
        return tuned

    def score(self, model: Model) -> float:
        return evaluate_top1(model, self.val_data)


@dataclass
class Stage1Result:
    model: Model
    state: ExplorationState
    composed: object
    val_accuracy: float
    delta_met: bool


def stage1(original: Model, composed, cfg, baseline_val: float, tuner: FineTuner,
           fac: Factorizer | None = None) -> Stage1Result:
    """Decompose the selected layers at their initial ranks, fine-tune, and
    back off ranks until the validation drop is within ``cfg.delta``.

    Every round rebuilds from ``original``; the best candidate by
    (feasible, fewest parameters) is returned.
    """
    fac = fac or Factorizer(original)
    if not composed.selected():
        state = ExplorationState(ranks={}, best_model=original, best_val_accuracy=baseline_val,
                                 best_params=count_params(original), feasible=True)
        return Stage1Result(original, state, composed, baseline_val, True)

    ranks = initial_ranks(original, composed, cfg.epsilon1, fac)
    caps = {i: rank_cap(original.layers[i]) for i in ranks}
    state = ExplorationState(ranks=dict(ranks))
    best_key = None
    for rnd in range(cfg.backoff_rounds + 1):
        state.round = rnd
        fits = {i: fac.fit(i, r) for i, r in ranks.items()}
        if ranks:
            candidate = tuner.tune(fac.build(ranks), cfg.finetune_epochs_stage1, 1, rnd)
            acc = tuner.score(candidate)
        else:
            candidate, acc = original, baseline_val
        params = count_params(candidate)
        term = check_termination(baseline_val, acc, cfg.delta)
        state.history.append({
            "round": rnd,
            "ranks": {str(i): r for i, r in sorted(ranks.items())},
            "fits": {str(i): f for i, f in sorted(fits.items())},
            "val_accuracy": acc,
            "params": params,
            "passed": term.passed,
        })
        log.info("stage1 round %d ranks=%s val_acc=%.4f params=%d passed=%s",
                 rnd, dict(sorted(ranks.items())), acc, params, term.passed)
        key = (term.passed, -params)
        if best_key is None or key > best_key:
            best_key = key
            state.best_model, state.best_val_accuracy, state.best_params = candidate, acc, params
            state.best_ranks, state.feasible, state.fits = dict(ranks), term.passed, fits
        if term.passed or not ranks or rnd == cfg.backoff_rounds:
            break
        ranks, dropped = backoff(ranks, fits, caps)
        composed = composed.without(dropped)
        state.ranks = dict(ranks)

    final_cl = composed.without(set(composed.selected()) - set(state.best_ranks))
    state.ranks = dict(state.best_ranks)
    return Stage1Result(state.best_model, state, final_cl, state.best_val_accuracy, state.feasible)
