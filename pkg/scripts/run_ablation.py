"""Train the four ablation arms over several seeds and print the comparison table.

    python3 scripts/run_ablation.py --out runs/ablation --seeds 0 1 2 3 4
"""

import argparse
import logging
from pathlib import Path

from dmadapter.config import RunConfig, load
from dmadapter.experiments import run_ablation_suite


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--out", type=Path, default=Path("runs/ablation"))
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load(args.config) if args.config else RunConfig()
    if args.epochs:
        cfg = cfg.replace(**{"optim.epochs": args.epochs})
    args.out.mkdir(parents=True, exist_ok=True)
    table = run_ablation_suite(cfg.validate(), args.seeds, out_dir=args.out)
    print(table.format())
    print(f"per-seed rows: {args.out / 'ablation.csv'}")


if __name__ == "__main__":
    main()
