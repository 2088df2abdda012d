"""Sweep chunk size against the full-bag and subsampling baselines.

Thin wrapper over the experiment matrix for quick interactive runs; the
``matrix`` CLI command does the same from a config file.

    python scripts/alpha_sweep.py --alphas 10 25 50 100 --epochs 100 --repeats 2
"""
import argparse
import sys
from dataclasses import replace

from abmil_acc.bagdata import BagSpec
from abmil_acc.evalbench import rows_to_csv, run_matrix
from abmil_acc.gradstrat import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--alphas", type=float, nargs="+", default=[10, 25, 50, 100])
    ap.add_argument("--strategies", nargs="+", default=["full_bag", "accumulate", "sample_train"])
    ap.add_argument("--inference", type=float, nargs="+", default=[100, 50])
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--repeats", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="CSV path (stdout if omitted)")
    args = ap.parse_args()

    config = replace(TrainConfig(seed=args.seed), epochs=args.epochs,
                     selection_window=min(15, args.epochs))
    rows = run_matrix(BagSpec(seed=args.seed), args.strategies, args.alphas, args.inference,
                      args.repeats, config)
    text = rows_to_csv(rows)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


if __name__ == "__main__":
    main()
