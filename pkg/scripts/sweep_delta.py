"""Compression reached as a function of the tolerated accuracy drop.

Trains one small baseline on the synthetic set and runs the two-stage
pipeline once per delta, printing params/MACs ratios and the test drop.

    python3 scripts/sweep_delta.py --deltas 0.25 0.5 1 2 4
"""
import argparse
import logging

from deltarank import checkpoint
from deltarank.conductor import run_pipeline
from deltarank.config import AnnealSchedule, OptimizationConfig
from deltarank.data import normalize_dataset, synth_shapes, znorm_stats
from deltarank.runtime import TrainConfig, reference_cnn, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--deltas", type=float, nargs="+", default=[0.25, 0.5, 1.0, 2.0, 4.0])
    ap.add_argument("--n", type=int, default=300, help="samples per class")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=10, help="annealing steps")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    raw = synth_shapes(args.n, 4, 16, args.seed)
    stats = znorm_stats(raw)
    train_set = normalize_dataset(raw, stats)
    test_set = normalize_dataset(synth_shapes(args.n, 4, 16, args.seed + 1), stats)
    model = reference_cnn((1, 16, 16), 4, seed=args.seed).with_norm(*stats)
    model, _ = train(model, train_set, TrainConfig(epochs=6, lr=0.01, seed=args.seed))
    model = checkpoint.round_to_f32(model)

    print(f"{'delta':>6}{'params':>10}{'MACs':>10}{'test drop':>11}  met")
    for delta in args.deltas:
        cfg = OptimizationConfig(delta=delta, stage=2, seed=args.seed, crop_fraction=1.0,
                                 time_runs=3, anneal=AnnealSchedule(steps=args.steps))
        res = run_pipeline(model, train_set, test_set, cfg)
        enh = res.enhancement
        print(f"{delta:>6.2f}{enh.params:>9.2f}x{enh.macs:>9.2f}x{res.test_drop:>11.3f}  "
              f"{'yes' if not res.delta_not_met else 'no'}")


if __name__ == "__main__":
    main()
