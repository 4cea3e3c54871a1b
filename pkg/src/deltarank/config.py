"""Configuration records shared by the conductor and both search stages."""
from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class AnnealSchedule:
    t0: float = 0.1
    gamma: float = 0.9
    steps: int = 20
    shrink_factors: tuple[float, ...] = (0.6, 0.8)
    grow_factor: float = 1.25
    grow_prob: float = 0.2
    penalty: float = 10.0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("anneal gamma must lie in (0, 1)")
        if self.t0 <= 0:
            raise ValueError("anneal t0 must be > 0")
        if self.steps < 0:
            raise ValueError("anneal steps must be >= 0")
        if not 0 <= self.grow_prob <= 1:
            raise ValueError("anneal grow_prob must lie in [0, 1]")


@dataclass(frozen=True)
class OptimizationConfig:
    delta: float = 1.0
    stage: int = 1
    workers: int = 1
    seed: int = 0
    min_layer_params: int = 1000
    epsilon1: float = 0.05
    finetune_epochs_stage1: int = 10
    proxy_epochs: int = 2
    final_epochs: int = 10
    backoff_rounds: int = 5
    anneal: AnnealSchedule = field(default_factory=AnnealSchedule)
    # fine-tuning hyperparameters (not given by the method description)
    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    augment: bool = True
    crop_fraction: float = 0.8
    flip_prob: float = 0.5
    val_fraction: float = 0.1
    als_max_iters: int = 200
    als_tol: float = 1e-7
    als_restarts: int = 3
    time_runs: int = 30

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        for name in ("finetune_epochs_stage1", "proxy_epochs", "final_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.backoff_rounds < 0:
            raise ValueError("backoff_rounds must be >= 0")
        if not 0 < self.crop_fraction <= 1:
            raise ValueError("crop_fraction must lie in (0, 1]")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class ComposedList:
    """One bit per optimizable layer: 1 = transform, 0 = keep frozen."""

    indices: tuple[int, ...]
    bits: tuple[int, ...]

    def __post_init__(self):
        if len(self.indices) != len(self.bits):
            raise ValueError("composed list indices and bits differ in length")
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("composed list bits must be 0 or 1")

    def selected(self) -> list[int]:
        return [i for i, b in zip(self.indices, self.bits) if b]

    def frozen(self) -> list[int]:
        return [i for i, b in zip(self.indices, self.bits) if not b]

    def without(self, dropped) -> "ComposedList":
        dropped = set(dropped)
        return ComposedList(
            self.indices, tuple(0 if i in dropped else b for i, b in zip(self.indices, self.bits))
        )


@dataclass(frozen=True)
class Termination:
    passed: bool
    margin: float


def check_termination(baseline_acc: float, candidate_acc: float, delta: float) -> Termination:
    """Pass iff the absolute accuracy drop is at most ``delta`` (inclusive).

    Accuracies are percentages of finite sets, so the comparison allows 1e-9
    of rounding slack at the boundary.
    """
    drop = baseline_acc - candidate_acc
    return Termination(drop <= delta + 1e-9, delta - drop)
