"""Named configurations: full-scale counting and the gradient-check model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import autodiff as ad
from .config import BackboneConfig, LossConfig, MoEConfig, RunConfig
from .gradcheck import GradCheckReport, grad_check
from .model import DMAdapterModel
from .moe import count_trainable_params
from .objectives import SdmConfig, branch_lb, match_distribution, sdm_bidirectional, total_loss


@dataclass(frozen=True)
class CountingPreset:
    """Branch widths and depths for counting only; nothing is instantiated."""

    dims: Dict[str, int]
    layers: Dict[str, int]
    moe: MoEConfig


PRESETS = {
    # ViT-B/16 image tower and the 512-wide CLIP text transformer
    "paper-clip-b16": CountingPreset(
        dims={"vision": 768, "text": 512},
        layers={"vision": 12, "text": 12},
        moe=MoEConfig(n_experts=6, top_k=2, reduction=8, router_mode="domain", n_prompts=4),
    ),
    "toy": CountingPreset(
        dims={"vision": 64, "text": 64},
        layers={"vision": 4, "text": 4},
        moe=MoEConfig(),
    ),
}


def count_preset(name: str) -> Dict[str, int]:
    preset = PRESETS[name]
    return count_trainable_params(preset.moe, preset.dims, preset.layers)


def gradcheck_config(seed: int = 0) -> RunConfig:
    cfg = RunConfig(
        backbone=BackboneConfig(d_model=16, n_heads=2, n_layers=2, image_hw=(8, 8), patch=8,
                                vocab_size=8, text_len=4, init_std=0.3, seed=seed),
        moe=MoEConfig(n_experts=6, top_k=2, reduction=8, router_mode="domain", n_prompts=4),
        loss=LossConfig(alpha=0.5, tau=0.02, epsilon=1e-8),
        seed=seed,
    )
    cfg.data.n_attributes = 1
    return cfg


def _min_topk_gap(outcomes) -> float:
    gap = np.inf
    for o in outcomes:
        if o.logits is None or o.logits.shape[1] == o.indices.shape[1]:
            continue
        srt = np.sort(o.logits, axis=1)[:, ::-1]
        k = o.indices.shape[1]
        gap = min(gap, float((srt[:, k - 1] - srt[:, k]).min()))
    return gap


def model_grad_check(seed: int = 0, eps: float = 1e-4, tol: float = 1e-4):
    """Finite-difference check of every trainable tensor of a 2-layer domain-router model.

    Two pairs, two tokens per sequence (one patch + [CLS]; [BOS] + [EOS]).
    Adapter weights are drawn at random rather than zero so every path
    carries gradient. Returns the report and the smallest K-th/(K+1)-th
    logit gap seen, which must stay well above ``eps`` for the check to
    be meaningful.
    """
    cfg = gradcheck_config(seed)
    with ad.default_dtype(np.float64):
        model = DMAdapterModel(cfg.backbone, cfg.moe, seed=seed)
        rng = np.random.default_rng(seed + 1)
        for p in model.trainable_parameters():
            p.tensor.data[...] = rng.normal(0.0, 0.5, size=p.shape)
        pixels = rng.normal(size=(2, 8, 8, 3))
        captions = np.zeros((2, 0), dtype=np.intp)
        ids = np.array([0, 1])
        q = match_distribution(ids)
        sdm_cfg = SdmConfig(cfg.loss.tau, cfg.loss.epsilon)

        def loss():
            v, out_i = model.encode_images(pixels)
            t, out_t = model.encode_texts(captions)
            return total_loss(sdm_bidirectional(v, t, q, sdm_cfg), branch_lb(out_i),
                              branch_lb(out_t), cfg.loss.alpha)

        with ad.no_grad():
            _, out_i = model.encode_images(pixels)
            _, out_t = model.encode_texts(captions)
        gap = _min_topk_gap(out_i + out_t)
        report: GradCheckReport = grad_check(loss, model.trainable_parameters(), eps=eps, tol=tol)
    return report, gap
