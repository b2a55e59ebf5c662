#!/usr/bin/env python3
"""Print the per-iteration training objective of one variant on benchmark data.

    python3 scripts/convergence.py --variant nocq --seed 0 --mu 0.001
"""

import argparse
import csv
import sys

from vqann.bench import PRESETS, bench_data
from vqann.cq import TrainConfig
from vqann.model import VARIANTS
from vqann.training import train_model


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--variant", type=str.upper, choices=VARIANTS, default="NOCQ")
    ap.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--mu", type=float, default=None, help="omit to select by validation")
    ap.add_argument("--outer-iters", type=int, default=None)
    ap.add_argument("--csv", default=None, help="write iteration,objective[,error] rows here")
    args = ap.parse_args()

    p = PRESETS[args.preset]
    x, _ = bench_data(p, args.seed)
    cfg = TrainConfig(mu=args.mu, seed=args.seed, outer_iters=args.outer_iters or p.outer_iters,
                      select_outer_iters=p.select_outer_iters,
                      validation_max_queries=p.validation_max_queries, mu_scales=p.mu_scales)
    model = train_model(args.variant, x, p.m, p.k, cfg)

    errors = model.diagnostics.get("error_log")
    rows = []
    for i, value in enumerate(model.train_log):
        row = {"iteration": i, "objective": value}
        if errors is not None and i < len(errors):
            row["error"] = errors[i]
        rows.append(row)
    print(f"{model.variant} seed={args.seed} mu={model.mu:.6g} ({len(rows) - 1} iterations)")
    for row in rows:
        extra = f"  error={row['error']:.6f}" if "error" in row else ""
        print(f"iter {row['iteration']:3d}  objective={row['objective']:.6f}{extra}")
    if "l1_log" in model.diagnostics:
        print("l1 phase:", " ".join(f"{v:.4f}" for v in model.diagnostics["l1_log"]))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
