"""Frozen dual encoder with DM-Adapter hooks on every MLP sublayer."""

from __future__ import annotations

from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .backbone import BRANCHES, DualEncoder
from .config import BackboneConfig, MoEConfig
from .moe import DMAdapter, count_trainable_params


class DMAdapterModel:
    def __init__(self, backbone_cfg: BackboneConfig, moe_cfg: Optional[MoEConfig],
                 seed: int = 0):
        self.backbone = DualEncoder(backbone_cfg)
        self.backbone.freeze()
        self.moe_cfg = moe_cfg
        self.adapter = None
        if moe_cfg is not None:
            d, n_layers = backbone_cfg.d_model, backbone_cfg.n_layers
            self.adapter = DMAdapter(moe_cfg, {b: d for b in BRANCHES},
                                     {b: n_layers for b in BRANCHES}, seed)

    @property
    def adapter_input(self) -> str:
        return self.moe_cfg.adapter_input if self.moe_cfg is not None else "x"

    def _hooks(self, branch: str):
        return None if self.adapter is None else self.adapter.hooks(branch)

    def encode_images(self, pixels):
        return self.backbone.encode_images(pixels, self._hooks("vision"), self.adapter_input)

    def encode_texts(self, token_ids):
        return self.backbone.encode_texts(token_ids, self._hooks("text"), self.adapter_input)

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.named_parameters() if p.trainable]

    def named_parameters(self) -> List[Parameter]:
        params = self.backbone.named_parameters()
        if self.adapter is not None:
            params += self.adapter.named_parameters()
        return params

    def parameter_dict(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.named_parameters()}

    def count_trainable(self) -> int:
        return int(sum(p.size for p in self.trainable_parameters()))

    def formula_count(self) -> int:
        if self.moe_cfg is None:
            return 0
        cfg = self.backbone.cfg
        dims = {b: cfg.d_model for b in BRANCHES}
        layers = {b: cfg.n_layers for b in BRANCHES}
        return count_trainable_params(self.moe_cfg, dims, layers)["total"]

    def encode_all(self, pixels=None, token_ids=None, batch_size: int = 64):
        """Inference-mode features for whole arrays, as numpy (rows x d)."""
        out = []
        with ad.no_grad():
            if pixels is not None:
                feats = [self.encode_images(pixels[i:i + batch_size])[0].data
                         for i in range(0, len(pixels), batch_size)]
                out.append(np.concatenate(feats) if feats else np.empty((0, self.backbone.cfg.d_model)))
            if token_ids is not None:
                feats = [self.encode_texts(token_ids[i:i + batch_size])[0].data
                         for i in range(0, len(token_ids), batch_size)]
                out.append(np.concatenate(feats) if feats else np.empty((0, self.backbone.cfg.d_model)))
        return out[0] if len(out) == 1 else tuple(out)
