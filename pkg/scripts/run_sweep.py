"""Sweep the expert count or Top-K and report median Rank-1 with cost figures.

    python3 scripts/run_sweep.py --param n_experts --values 2 4 6 8 10
    python3 scripts/run_sweep.py --param top_k --values 1 2 3 --costs-only
"""

import argparse
import logging
from pathlib import Path

from dmadapter.config import RunConfig, load
from dmadapter.experiments import run_hyperparam_sweep


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path)
    parser.add_argument("--param", choices=["n_experts", "top_k"], required=True)
    parser.add_argument("--values", type=int, nargs="+", required=True)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--costs-only", action="store_true")
    parser.add_argument("--out", type=Path, default=Path("runs/sweep"))
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = (load(args.config) if args.config else RunConfig()).validate()
    args.out.mkdir(parents=True, exist_ok=True)
    rows = run_hyperparam_sweep(cfg, args.param, args.values, args.seeds,
                                train_runs=not args.costs_only, out_dir=args.out)
    print(f"{args.param:>10} {'R@1 med':>8} {'params':>9} {'expert flops':>13}")
    for r in rows:
        print(f"{r.value:>10} {r.median_rank1:>8.4f} {r.trainable_params:>9} {r.expert_flops:>13}")


if __name__ == "__main__":
    main()
