"""Train briefly (or load a checkpoint) and export per-token expert weights.

    python3 scripts/export_heatmap.py --checkpoint runs/demo/checkpoint.bin --out figs
"""

import argparse
from pathlib import Path

import numpy as np

from dmadapter.config import RunConfig
from dmadapter.data import generate_dataset
from dmadapter.heatmap import export_expert_heatmap
from dmadapter.train import load_checkpoint, model_from_checkpoint, train


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--checkpoint", type=Path)
    parser.add_argument("--epochs", type=int, default=5, help="used when no checkpoint is given")
    parser.add_argument("--n-captions", type=int, default=3)
    parser.add_argument("--out", type=Path, default=Path("runs/heatmaps"))
    args = parser.parse_args()

    if args.checkpoint:
        cfg = load_checkpoint(args.checkpoint).config
        model = model_from_checkpoint(args.checkpoint)
    else:
        cfg = RunConfig().replace(**{"optim.epochs": args.epochs})
        model = train(cfg).model
    test = generate_dataset(cfg.data, cfg.backbone).test
    for i in range(args.n_captions):
        txt, svg = export_expert_heatmap(model, test.captions[i], args.out / f"caption{i}", "text")
        grid = np.loadtxt(txt)
        print(f"caption {i}: {svg} (rows {grid.shape[0]}, mean weight per expert "
              f"{np.round(grid.mean(axis=0), 3).tolist()})")


if __name__ == "__main__":
    main()
