"""Adam training of the adapter parameters, checkpointing and evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .config import IntegrityError, RunConfig, from_dict, to_dict
from .data import SyntheticDataset, generate_dataset
from .metrics import RetrievalReport, evaluate_similarity
from .model import DMAdapterModel
from .moe import usage_entropy
from .objectives import SdmConfig, branch_lb, match_distribution, sdm_bidirectional, total_loss

logger = logging.getLogger(__name__)

MAGIC = b"DMADCKPT"
FORMAT_VERSION = 1


class TrainingDivergence(FloatingPointError):
    pass


@dataclass
class MetricsRow:
    epoch: int
    step: int
    loss_total: float
    loss_sdm: float
    loss_lb_image: float
    loss_lb_text: float
    rank1: float
    rank5: float
    rank10: float
    map: float
    expert_usage_entropy_image: float
    expert_usage_entropy_text: float


METRICS_HEADER = [f.name for f in fields(MetricsRow)]


def _fmt(value) -> str:
    return str(value) if isinstance(value, int) else format(float(value), ".17g")


def append_metrics(path: Path, row: MetricsRow) -> None:
    """Append one row, writing the header first if the file is new."""
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(METRICS_HEADER)
        writer.writerow([_fmt(getattr(row, name)) for name in METRICS_HEADER])
        fh.flush()


def read_metrics(path) -> List[MetricsRow]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(MetricsRow(**{f.name: (int(r[f.name]) if f.type in ("int", int) else float(r[f.name]))
                                 for f in fields(MetricsRow)}))
    return out


class Adam:
    def __init__(self, params: Sequence[ad.Parameter], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self) -> None:
        ad.zero_grads(self.params)

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.tensor.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ----------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: RunConfig
    parameters: Dict[str, np.ndarray]
    optimizer_state: Dict[str, Dict[str, np.ndarray]] = field(default_factory=dict)
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """JSON header (config, tensor directory) then raw little-endian float64 blocks."""
    path = Path(path)
    blocks, directory, offset = [], [], 0
    groups = {"param": ckpt.parameters}
    groups.update({f"adam_{k}": v for k, v in ckpt.optimizer_state.items()})
    for group, tensors in groups.items():
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            directory.append({"group": group, "name": name, "shape": list(arr.shape),
                              "offset": offset, "nbytes": len(raw)})
            blocks.append(raw)
            offset += len(raw)
    header = json.dumps({
        "version": FORMAT_VERSION,
        "config": to_dict(ckpt.config),
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
        "tensors": directory,
    }).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blocks:
            fh.write(raw)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise IntegrityError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(raw[start:start + hlen])
    body = raw[start + hlen:]
    groups: Dict[str, Dict[str, np.ndarray]] = {}
    for entry in header["tensors"]:
        chunk = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        groups.setdefault(entry["group"], {})[entry["name"]] = arr
    optim = {k[len("adam_"):]: v for k, v in groups.items() if k.startswith("adam_")}
    return Checkpoint(from_dict(header["config"]), groups.get("param", {}), optim,
                      header["step"], header["rng_state"], header.get("extra", {}))


def build_model(cfg: RunConfig) -> DMAdapterModel:
    return DMAdapterModel(cfg.backbone, cfg.moe, seed=cfg.seed)


def restore_parameters(model: DMAdapterModel, params: Dict[str, np.ndarray]) -> None:
    named = model.parameter_dict()
    for name, arr in params.items():
        if name not in named:
            raise IntegrityError(f"checkpoint tensor {name!r} has no counterpart in the model")
        target = named[name]
        if tuple(arr.shape) != target.shape:
            raise IntegrityError(f"{name}: checkpoint shape {tuple(arr.shape)} vs model {target.shape}")
        target.tensor.data[...] = arr
    missing = [p.name for p in model.trainable_parameters() if p.name not in params]
    if missing:
        raise IntegrityError(f"checkpoint lacks trainable tensors, e.g. {missing[0]!r}")


def model_from_checkpoint(ckpt: Union[Checkpoint, str, Path]) -> DMAdapterModel:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    model = build_model(ckpt.config)
    restore_parameters(model, ckpt.parameters)
    return model


# ----------------------------------------------------------------------
# evaluation


def evaluate_model(model: DMAdapterModel, dataset: SyntheticDataset, split: str = "test",
                   seed: int = 0) -> RetrievalReport:
    """Caption queries against the split's image gallery, cosine similarity."""
    part = dataset.split(split)
    gallery = model.encode_all(pixels=part.images)
    queries = model.encode_all(token_ids=part.captions)
    sim = queries @ gallery.T
    return evaluate_similarity(sim, part.caption_ids, part.image_ids, seed=seed)


def evaluate(checkpoint, split: str = "test") -> RetrievalReport:
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    cfg = ckpt.config
    with ad.default_dtype(np.float32 if cfg.precision == 32 else np.float64):
        model = model_from_checkpoint(ckpt)
        dataset = generate_dataset(cfg.data, cfg.backbone)
        return evaluate_model(model, dataset, split, seed=cfg.seed)


# ----------------------------------------------------------------------
# training


@dataclass
class EpochAccumulator:
    steps: int = 0
    loss_total: float = 0.0
    loss_sdm: float = 0.0
    lb_image: float = 0.0
    lb_text: float = 0.0
    p_avg: Dict[str, List[List[float]]] = field(default_factory=dict)

    def add(self, total, sdm, lb_i, lb_t, outcomes: Dict[str, list]) -> None:
        self.steps += 1
        self.loss_total += total
        self.loss_sdm += sdm
        self.lb_image += lb_i
        self.lb_text += lb_t
        for branch, outs in outcomes.items():
            sums = self.p_avg.setdefault(branch, [[0.0] * o.n for o in outs])
            for layer, o in enumerate(outs):
                sums[layer] = [a + float(b) for a, b in zip(sums[layer], o.p_avg.data)]

    def entropy(self, branch: str) -> float:
        layers = self.p_avg.get(branch)
        if not layers or self.steps == 0:
            return 0.0
        return float(np.mean([usage_entropy(np.asarray(s) / self.steps) for s in layers]))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    checkpoint_path: Optional[Path]
    metrics_path: Optional[Path]
    rows: List[MetricsRow]
    model: DMAdapterModel


def steps_per_epoch(cfg: RunConfig, n_pairs: int) -> int:
    return math.ceil(n_pairs / cfg.optim.batch_size)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def compute_loss(model: DMAdapterModel, pixels, captions, ids, cfg: RunConfig):
    """Forward both branches; returns (total, sdm, lb_image, lb_text, outcomes)."""
    v, out_img = model.encode_images(pixels)
    t, out_txt = model.encode_texts(captions)
    q = match_distribution(ids)
    sdm = sdm_bidirectional(v, t, q, SdmConfig(cfg.loss.tau, cfg.loss.epsilon))
    lb_i, lb_t = branch_lb(out_img), branch_lb(out_txt)
    total = total_loss(sdm, lb_i, lb_t, cfg.loss.alpha)
    return total, sdm, lb_i, lb_t, {"vision": out_img, "text": out_txt}


def _diagnose(loss: ad.Tensor, step: int) -> TrainingDivergence:
    node = ad.Tape.from_output(loss).first_nonfinite() if loss.node is not None else None
    where = f"first produced by op '{node.op}'" if node is not None else "source unknown"
    return TrainingDivergence(f"non-finite loss at step {step}: {where}")


def train(cfg: RunConfig, out_dir=None, max_steps: Optional[int] = None,
          resume: Union[None, str, Path, Checkpoint] = None) -> TrainResult:
    """Train the adapter parameters on the synthetic corpus.

    Writes ``metrics.csv`` (one row per epoch, evaluated on the held-out
    identities) and ``checkpoint.bin`` into ``out_dir`` when given. Training
    stops after ``max_steps`` global steps if set; a run resumed from its
    checkpoint continues exactly where it stopped.
    """
    cfg.validate()
    dtype = np.float32 if cfg.precision == 32 else np.float64
    with ad.default_dtype(dtype):
        return _train(cfg, out_dir, max_steps, resume)


def _train(cfg, out_dir, max_steps, resume) -> TrainResult:
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.csv" if out_dir is not None else None

    dataset = generate_dataset(cfg.data, cfg.backbone)
    train_split = dataset.train
    model = build_model(cfg)
    opt = Adam(model.trainable_parameters(), cfg.optim.lr, cfg.optim.beta1,
               cfg.optim.beta2, cfg.optim.eps)
    acc = EpochAccumulator()
    start = 0
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        restore_parameters(model, ckpt.parameters)
        for name in opt.m:
            opt.m[name][...] = ckpt.optimizer_state["m"][name]
            opt.v[name][...] = ckpt.optimizer_state["v"][name]
        opt.t = int(ckpt.extra["adam_t"])
        acc = EpochAccumulator(**ckpt.extra["epoch_acc"])
        start = ckpt.step
    elif metrics_path is not None and metrics_path.exists():
        metrics_path.unlink()

    spe = steps_per_epoch(cfg, train_split.n_pairs)
    total_steps = spe * cfg.optim.epochs
    stop = total_steps if max_steps is None else min(total_steps, max_steps)
    bs = cfg.optim.batch_size
    rows: List[MetricsRow] = []

    for step in range(start, stop):
        epoch, pos = divmod(step, spe)
        order = epoch_order(cfg.seed, epoch, train_split.n_pairs)
        batch = order[pos * bs:(pos + 1) * bs]
        pixels = train_split.images[train_split.caption_image[batch]]
        captions = train_split.captions[batch]
        ids = train_split.caption_ids[batch]

        opt.zero_grad()
        total, sdm, lb_i, lb_t, outcomes = compute_loss(model, pixels, captions, ids, cfg)
        if not math.isfinite(total.item()):
            raise _diagnose(total, step)
        ad.backward(total)
        opt.step()
        acc.add(total.item(), sdm.item(), lb_i.item(), lb_t.item(), outcomes)

        if pos == spe - 1:
            report = evaluate_model(model, dataset, "test", cfg.seed)
            n = acc.steps
            row = MetricsRow(epoch + 1, step + 1, acc.loss_total / n, acc.loss_sdm / n,
                             acc.lb_image / n, acc.lb_text / n, report.rank1, report.rank5,
                             report.rank10, report.map, acc.entropy("vision"), acc.entropy("text"))
            rows.append(row)
            if metrics_path is not None:
                append_metrics(metrics_path, row)
            logger.info("epoch %d step %d loss %.4f R@1 %.3f", row.epoch, row.step,
                        row.loss_total, row.rank1)
            acc = EpochAccumulator()

    ckpt = Checkpoint(
        config=cfg,
        parameters={p.name: p.data.copy() for p in model.trainable_parameters()},
        optimizer_state={"m": {k: v.copy() for k, v in opt.m.items()},
                         "v": {k: v.copy() for k, v in opt.v.items()}},
        step=max(stop, start),
        rng_state={"kind": "per-epoch-permutation", "seed": cfg.seed},
        extra={"adam_t": opt.t, "epoch_acc": {
            "steps": acc.steps, "loss_total": acc.loss_total, "loss_sdm": acc.loss_sdm,
            "lb_image": acc.lb_image, "lb_text": acc.lb_text, "p_avg": acc.p_avg}},
    )
    ckpt_path = save_checkpoint(ckpt, out_dir / "checkpoint.bin") if out_dir is not None else None
    return TrainResult(ckpt, ckpt_path, metrics_path, rows, model)


def full_parameters(model: DMAdapterModel) -> Dict[str, np.ndarray]:
    """Every tensor, frozen ones included, for a full checkpoint."""
    return {p.name: p.data.copy() for p in model.named_parameters()}

