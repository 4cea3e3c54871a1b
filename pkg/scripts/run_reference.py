"""Synthetic reference experiment: train the reference CNN, then compress it
with Stage 1 only and with Stage 1 + annealing, and print both tables.

    python3 scripts/run_reference.py --n 1000 --seed 7
"""
import argparse
import json
import logging
import time
from pathlib import Path

from deltarank import checkpoint
from deltarank.conductor import run_pipeline
from deltarank.config import OptimizationConfig
from deltarank.data import normalize_dataset, synth_shapes, znorm_stats
from deltarank.runtime import TrainConfig, evaluate_top1, reference_cnn, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=1000, help="samples per class")
    ap.add_argument("--hw", type=int, default=16)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--delta", type=float, default=1.0)
    ap.add_argument("--crop-fraction", type=float, default=1.0)
    ap.add_argument("--out-dir", type=Path, default=Path("runs/reference"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    args.out_dir.mkdir(parents=True, exist_ok=True)

    raw_train = synth_shapes(args.n, 4, args.hw, args.seed)
    raw_test = synth_shapes(args.n, 4, args.hw, args.seed + 1)
    stats = znorm_stats(raw_train)
    train_set, test_set = normalize_dataset(raw_train, stats), normalize_dataset(raw_test, stats)

    t0 = time.perf_counter()
    model = reference_cnn((1, args.hw, args.hw), 4, seed=args.seed).with_norm(*stats)
    model, losses = train(model, train_set, TrainConfig(epochs=6, lr=0.01, seed=args.seed))
    model = checkpoint.round_to_f32(model)
    checkpoint.save(model, args.out_dir / "baseline.nltm")
    print(f"baseline test top-1 {evaluate_top1(model, test_set):.2f}% "
          f"(losses {', '.join(f'{l:.3f}' for l in losses)}; {time.perf_counter() - t0:.0f}s)")

    summary = {}
    for stage in (1, 2):
        cfg = OptimizationConfig(delta=args.delta, stage=stage, seed=args.seed,
                                 crop_fraction=args.crop_fraction)
        t0 = time.perf_counter()
        res = run_pipeline(model, train_set, test_set, cfg, {"kind": "synth", "seed": args.seed})
        checkpoint.save(res.model, args.out_dir / f"stage{stage}.nltm")
        (args.out_dir / f"stage{stage}.json").write_text(res.report_text)
        print(f"\n== stage {stage} ({time.perf_counter() - t0:.0f}s) ==")
        print(res.table_text, end="")
        print(f"validation drop {res.val_drop:.3f}, test drop {res.test_drop:.3f}, "
              f"delta_not_met={res.delta_not_met}")
        summary[stage] = {"params_ratio": res.enhancement.params, "macs_ratio": res.enhancement.macs,
                          "test_drop": res.test_drop}
    print("\n" + json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
