"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, missing files, invalid
config), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as cfgmod
from .config import ConfigError, DataError, IntegrityError, RunConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-experts", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--router", choices=["standard", "domain"])
    p.add_argument("--out", type=Path, default=Path("runs"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dmadapter", description="Domain-aware mixture-of-adapters toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train adapters on the synthetic corpus")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=["train", "test"], default="test")

    p = sub.add_parser("ablate", help="run the four ablation arms over several seeds")
    _common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("sweep", help="sweep the expert count or Top-K")
    _common(p)
    p.add_argument("--param", choices=["n_experts", "top_k"], required=True)
    p.add_argument("--values", type=int, nargs="+", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--epochs", type=int)
    p.add_argument("--costs-only", action="store_true", help="skip training, report counts")

    p = sub.add_parser("heatmap", help="export per-token expert weights of one layer")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--tokens", type=int, nargs="*", help="caption token ids (text branch)")
    p.add_argument("--layer", type=int)
    p.add_argument("--branch", choices=["text", "vision"], default="text")

    p = sub.add_parser("count-params", help="closed-form trainable parameter count")
    _common(p)
    p.add_argument("--preset", choices=["paper-clip-b16", "toy"])

    p = sub.add_parser("gradcheck", help="finite-difference check of a 2-layer model")
    _common(p)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("gen-data", help="write the synthetic corpus and its manifest")
    _common(p)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = cfgmod.load(args.config) if args.config is not None else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides.update({"seed": args.seed, "backbone.seed": args.seed, "data.seed": args.seed})
    if args.n_experts is not None:
        overrides["moe.n_experts"] = args.n_experts
    if args.top_k is not None:
        overrides["moe.top_k"] = args.top_k
    if args.alpha is not None:
        overrides["loss.alpha"] = args.alpha
    if args.router is not None:
        overrides["moe.router_mode"] = args.router
    if getattr(args, "epochs", None) is not None:
        overrides["optim.epochs"] = args.epochs
    cfg = cfg.replace(**overrides)
    return cfg.validate()


def cmd_train(args) -> int:
    from .train import train

    cfg = resolve_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    cfgmod.save(cfg, args.out / "config.ini")
    result = train(cfg, out_dir=args.out, max_steps=args.max_steps, resume=args.resume)
    last = result.rows[-1] if result.rows else None
    if last is not None:
        print(f"epoch {last.epoch} R@1 {last.rank1:.4f} R@5 {last.rank5:.4f} "
              f"R@10 {last.rank10:.4f} mAP {last.map:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate

    report = evaluate(args.checkpoint, args.split)
    print(json.dumps(report.as_dict(), indent=2))
    return 0


def cmd_ablate(args) -> int:
    from .experiments import run_ablation_suite

    cfg = resolve_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    table = run_ablation_suite(cfg, args.seeds, out_dir=args.out)
    print(table.format())
    return 0


def cmd_sweep(args) -> int:
    from .experiments import run_hyperparam_sweep

    cfg = resolve_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = run_hyperparam_sweep(cfg, args.param, args.values, args.seeds,
                                train_runs=not args.costs_only, out_dir=args.out)
    print(f"{args.param:>10} {'R@1 med':>8} {'params':>10} {'expert flops':>12} {'router flops':>12}")
    for r in rows:
        print(f"{r.value:>10} {r.median_rank1:>8.4f} {r.trainable_params:>10} "
              f"{r.expert_flops:>12} {r.router_flops:>12}")
    return 0


def cmd_heatmap(args) -> int:
    from .data import generate_dataset
    from .heatmap import export_expert_heatmap
    from .train import build_model, model_from_checkpoint

    if args.checkpoint is not None:
        model = model_from_checkpoint(args.checkpoint)
        cfg = None
    else:
        cfg = resolve_config(args)
        model = build_model(cfg)
    if args.branch == "text" and args.tokens:
        inputs = np.asarray(args.tokens)
    else:
        from .train import load_checkpoint

        cfg = cfg or load_checkpoint(args.checkpoint).config
        test = generate_dataset(cfg.data, cfg.backbone).test
        inputs = test.captions[0] if args.branch == "text" else test.images[0]
    txt, svg = export_expert_heatmap(model, inputs, args.out, args.branch, args.layer)
    print(f"grid: {txt}\nsvg: {svg}")
    return 0


def cmd_count_params(args) -> int:
    from .backbone import BRANCHES
    from .moe import count_trainable_params
    from .presets import count_preset

    if args.preset is not None:
        counts = count_preset(args.preset)
        label = args.preset
    else:
        cfg = resolve_config(args)
        dims = {b: cfg.backbone.d_model for b in BRANCHES}
        layers = {b: cfg.backbone.n_layers for b in BRANCHES}
        counts = count_trainable_params(cfg.moe, dims, layers)
        label = str(args.config) if args.config else "default config"
    print(f"trainable parameters ({label})")
    for key, value in counts.items():
        if key != "total":
            print(f"  {key:<14} {value:>12,}")
    print(f"  {'total':<14} {counts['total']:>12,}  ({counts['total'] / 1e6:.2f}M)")
    return 0


def cmd_gradcheck(args) -> int:
    from .presets import model_grad_check

    seed = args.seed if args.seed is not None else 0
    report, gap = model_grad_check(seed, eps=args.eps, tol=args.tol)
    print(f"min top-k logit gap {gap:.3e}")
    print(report.summary())
    return 0 if report.passed else 2


def cmd_gen_data(args) -> int:
    from .data import export_manifest, generate_dataset

    cfg = resolve_config(args)
    manifest = export_manifest(generate_dataset(cfg.data, cfg.backbone), args.out)
    print(f"manifest: {manifest}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "heatmap": cmd_heatmap,
    "count-params": cmd_count_params,
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataError, IntegrityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
