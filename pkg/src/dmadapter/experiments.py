"""Toy-scale ablation arms and hyper-parameter sweeps."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import median
from typing import Dict, List, Optional, Sequence

from .backbone import BRANCHES
from .config import RunConfig, fingerprint
from .moe import count_trainable_params, flop_count_per_token
from .train import train

logger = logging.getLogger(__name__)

# the only fields an arm may change
ARM_FLAGS = ("moe.n_experts", "moe.top_k", "moe.router_mode", "loss.alpha")

ARMS: Dict[str, Dict[str, object]] = {
    "mlp_adapter": {"moe.n_experts": 1, "moe.top_k": 1, "moe.router_mode": "standard",
                    "loss.alpha": 0.0},
    "sma_wo_lb": {"moe.n_experts": 6, "moe.top_k": 2, "moe.router_mode": "standard",
                  "loss.alpha": 0.0},
    "sma_w_lb": {"moe.n_experts": 6, "moe.top_k": 2, "moe.router_mode": "standard",
                 "loss.alpha": 0.5},
    "dm_adapter": {"moe.n_experts": 6, "moe.top_k": 2, "moe.router_mode": "domain",
                   "loss.alpha": 0.5},
}

_RUN_CACHE: Dict[str, dict] = {}


def seeded(cfg: RunConfig, seed: int) -> RunConfig:
    """Same seed for adapters, batch order, backbone and data, so arms are paired."""
    return cfg.replace(**{"seed": seed, "backbone.seed": seed, "data.seed": seed})


def arm_config(base: RunConfig, arm: str, seed: int) -> RunConfig:
    return seeded(base, seed).replace(**ARMS[arm])


def run_once(cfg: RunConfig, out_dir: Optional[Path] = None) -> dict:
    """Train one configuration and summarise its final epoch (memoised per config)."""
    key = fingerprint(cfg)
    if key in _RUN_CACHE and out_dir is None:
        return _RUN_CACHE[key]
    result = train(cfg, out_dir=out_dir)
    last = result.rows[-1] if result.rows else None
    summary = {
        "rank1": last.rank1 if last else float("nan"),
        "rank5": last.rank5 if last else float("nan"),
        "rank10": last.rank10 if last else float("nan"),
        "map": last.map if last else float("nan"),
        "entropy_image": last.expert_usage_entropy_image if last else 0.0,
        "entropy_text": last.expert_usage_entropy_text if last else 0.0,
        "trainable_params": result.model.count_trainable(),
    }
    _RUN_CACHE[key] = summary
    return summary


@dataclass
class AblationRow:
    arm: str
    seed: int
    rank1: float
    rank5: float
    rank10: float
    map: float
    entropy_image: float
    entropy_text: float
    trainable_params: int


@dataclass
class AblationTable:
    rows: List[AblationRow]
    medians: Dict[str, Dict[str, float]] = field(default_factory=dict)
    spreads: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def median(self, arm: str, metric: str = "rank1") -> float:
        return self.medians[arm][metric]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            cols = list(asdict(self.rows[0]).keys())
            writer.writerow(cols)
            for row in self.rows:
                writer.writerow([getattr(row, c) for c in cols])
            for arm, stats in self.medians.items():
                writer.writerow([arm, "median"] + [stats.get(c, "") for c in cols[2:]])

    def format(self) -> str:
        lines = [f"{'arm':<12} {'R@1 med':>8} {'R@1 spread':>10} {'H_img':>6} {'H_txt':>6}"]
        for arm, stats in self.medians.items():
            lines.append(f"{arm:<12} {stats['rank1']:>8.4f} {self.spreads[arm]['rank1']:>10.4f} "
                         f"{stats['entropy_image']:>6.3f} {stats['entropy_text']:>6.3f}")
        return "\n".join(lines)


_SUMMARY_METRICS = ("rank1", "rank5", "rank10", "map", "entropy_image", "entropy_text")


def _aggregate(rows: List[AblationRow], arms: Sequence[str]):
    medians, spreads = {}, {}
    for arm in arms:
        mine = [r for r in rows if r.arm == arm]
        medians[arm] = {m: median(getattr(r, m) for r in mine) for m in _SUMMARY_METRICS}
        spreads[arm] = {m: max(getattr(r, m) for r in mine) - min(getattr(r, m) for r in mine)
                        for m in _SUMMARY_METRICS}
    return medians, spreads


def run_ablation_suite(base: RunConfig, seeds: Sequence[int], out_dir=None,
                       arms: Sequence[str] = tuple(ARMS), min_seeds: int = 5) -> AblationTable:
    """Run every arm for every seed; arms differ only in :data:`ARM_FLAGS`."""
    if len(seeds) < min_seeds:
        raise ValueError(f"ablation needs at least {min_seeds} seeds, got {len(seeds)}")
    rows = []
    for seed in seeds:
        for arm in arms:
            cfg = arm_config(base, arm, seed)
            run_dir = Path(out_dir) / f"{arm}_seed{seed}" if out_dir is not None else None
            summary = run_once(cfg, run_dir)
            logger.info("arm %s seed %d R@1 %.4f", arm, seed, summary["rank1"])
            rows.append(AblationRow(arm, seed, **summary))
    medians, spreads = _aggregate(rows, arms)
    table = AblationTable(rows, medians, spreads)
    if out_dir is not None:
        table.write_csv(Path(out_dir) / "ablation.csv")
    return table


@dataclass
class SweepRow:
    value: int
    median_rank1: float
    trainable_params: int
    expert_flops: int
    router_flops: int
    rank1_per_seed: List[float] = field(default_factory=list)


_SWEEP_FIELDS = {"n_experts": "moe.n_experts", "top_k": "moe.top_k"}


def sweep_costs(base: RunConfig, param: str, value: int):
    cfg = base.replace(**{_SWEEP_FIELDS[param]: value})
    dims = {b: cfg.backbone.d_model for b in BRANCHES}
    layers = {b: cfg.backbone.n_layers for b in BRANCHES}
    params = count_trainable_params(cfg.moe, dims, layers)["total"]
    expert, router = flop_count_per_token(cfg.moe, cfg.backbone.d_model)
    return cfg, params, expert, router


def run_hyperparam_sweep(base: RunConfig, param: str, values: Sequence[int],
                         seeds: Sequence[int], train_runs: bool = True,
                         out_dir=None) -> List[SweepRow]:
    """Median Rank-1 and cost figures per swept value of ``n_experts`` or ``top_k``."""
    if param not in _SWEEP_FIELDS:
        raise ValueError(f"sweep parameter must be one of {sorted(_SWEEP_FIELDS)}")
    if not values:
        raise ValueError("sweep needs at least one value")
    rows = []
    for value in values:
        cfg, params, expert, router = sweep_costs(base, param, value)
        scores = []
        if train_runs:
            for seed in seeds:
                run_dir = Path(out_dir) / f"{param}{value}_seed{seed}" if out_dir else None
                scores.append(run_once(seeded(cfg, seed), run_dir)["rank1"])
        rows.append(SweepRow(value, median(scores) if scores else float("nan"), params,
                             expert, router, scores))
    if out_dir is not None:
        with open(Path(out_dir) / f"sweep_{param}.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([param, "median_rank1", "trainable_params", "expert_flops",
                             "router_flops"])
            for r in rows:
                writer.writerow([r.value, r.median_rank1, r.trainable_params, r.expert_flops,
                                 r.router_flops])
    return rows
