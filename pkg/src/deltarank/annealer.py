"""Stage 2: simulated annealing over the rank vector with the composed list frozen."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import AnnealSchedule, check_termination
from .explorer import Factorizer, FineTuner, rank_cap
from .model_ir import Model, count_params, replace_layer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnergyTerms:
    size_ratio: float
    drop: float
    penalty: float = 10.0


def energy(terms: EnergyTerms, delta: float) -> float:
    """Size ratio plus a linear penalty on accuracy drop beyond ``delta``."""
    return terms.size_ratio + terms.penalty * max(0.0, terms.drop - delta)


def propose(ranks: dict, caps: dict, rng, schedule: AnnealSchedule = AnnealSchedule()):
    """Move one uniformly chosen layer's rank; returns ``(new_ranks, layer)``."""
    if not ranks:
        raise ValueError("cannot propose on an empty rank assignment")
    keys = sorted(ranks)
    index = keys[int(rng.integers(len(keys)))]
    r = ranks[index]
    if rng.random() < schedule.grow_prob:
        new_r = min(math.ceil(r * schedule.grow_factor), caps[index])
    else:
        factor = schedule.shrink_factors[int(rng.integers(len(schedule.shrink_factors)))]
        new_r = max(1, math.floor(r * factor))
    out = dict(ranks)
    out[index] = new_r
    return out, index


def accept(delta_e: float, temperature: float, rng) -> bool:
    """Metropolis rule; draws from ``rng`` only when ``delta_e > 0``."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if delta_e <= 0:
        return True
    return bool(rng.random() < math.exp(-delta_e / temperature))


@dataclass
class Stage2Result:
    model: Model
    ranks: dict
    val_accuracy: float
    audit: list = field(default_factory=list)
    feasible_accepted: int = 0
    improved: bool = False


def stage2(original: Model, stage1_model: Model, stage1_ranks: dict, stage1_val: float,
           cfg, baseline_val: float, tuner: FineTuner, fac: Factorizer) -> Stage2Result:
    """Anneal the ranks of the layers Stage 1 decomposed.

    Each step re-decomposes the moved layer from the original weights, proxy
    fine-tunes, and scores energy on the validation split. The best feasible
    state with no more parameters than Stage 1 is fine-tuned for
    ``final_epochs``; without one, the Stage 1 model is returned.
    """
    sched = cfg.anneal
    result = Stage2Result(stage1_model, dict(stage1_ranks), stage1_val)
    if sched.steps == 0 or not stage1_ranks:
        return result

    base_params = count_params(original)
    s1_params = count_params(stage1_model)
    caps = {i: rank_cap(original.layers[i]) for i in stage1_ranks}
    rng = np.random.default_rng([cfg.seed, 2])

    def score(model, acc):
        drop = baseline_val - acc
        return energy(EnergyTerms(count_params(model) / base_params, drop, sched.penalty), cfg.delta)

    cur_model, cur_ranks = stage1_model, dict(stage1_ranks)
    cur_e = score(stage1_model, stage1_val)
    best = None
    if check_termination(baseline_val, stage1_val, cfg.delta).passed:
        best = (cur_e, stage1_model, dict(cur_ranks), stage1_val)

    for k in range(1, sched.steps + 1):
        temp = sched.t0 * sched.gamma**k
        ranks, index = propose(cur_ranks, caps, rng, sched)
        entry = {"step": k, "temperature": temp, "layer": index,
                 "old_rank": cur_ranks[index], "new_rank": ranks[index]}
        if ranks[index] == cur_ranks[index]:
            entry.update(delta_e=0.0, accepted=True, feasible=None, noop=True)
            result.audit.append(entry)
            continue
        cand = replace_layer(cur_model, index, fac.layer(index, ranks[index]))
        cand = tuner.tune(cand, cfg.proxy_epochs, 2, k)
        acc = tuner.score(cand)
        e = score(cand, acc)
        d_e = e - cur_e
        ok = accept(d_e, temp, rng)
        feasible = check_termination(baseline_val, acc, cfg.delta).passed
        params = count_params(cand)
        entry.update(delta_e=d_e, energy=e, accepted=ok, feasible=feasible,
                     val_accuracy=acc, params=params, noop=False)
        result.audit.append(entry)
        log.info("stage2 step %d T=%.4g layer %d rank %d->%d dE=%+.4f acc=%.4f %s%s",
                 k, temp, index, entry["old_rank"], ranks[index], d_e, acc,
                 "accepted" if ok else "rejected", " feasible" if feasible else "")
        if ok:
            cur_model, cur_ranks, cur_e = cand, ranks, e
            if feasible:
                result.feasible_accepted += 1
        if feasible and params <= s1_params and (best is None or e < best[0]):
            best = (e, cand, dict(ranks), acc)

    if best is None or best[1] is stage1_model:
        return result
    _, model, ranks, acc = best
    final = tuner.tune(model, cfg.final_epochs, 3)
    final_acc = tuner.score(final)
    if check_termination(baseline_val, final_acc, cfg.delta).passed:
        model, acc = final, final_acc
    result.model, result.ranks, result.val_accuracy, result.improved = model, ranks, acc, True
    return result
