"""Toy dual encoder: pre-LN transformer branches for patches and token ids.

Both branches share the block layout ``x <- x + MHA(LN(x))`` followed by
``h_o = x + MLP(LN(x))``. A block may be given an adapter hook, a callable
``hook(adapter_in, h_o) -> (y, outcome)`` that replaces ``h_o`` with ``y``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .config import BackboneConfig, ConfigError, DataError

BRANCHES = ("vision", "text")

Hook = Callable[[Tensor, Tensor], tuple]


@dataclass
class TokenSequence:
    embeddings: np.ndarray
    special_positions: dict


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, N, patch*patch*C), patches in row-major grid order."""
    b, h, w, c = pixels.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} not divisible by patch {patch}")
    grid = pixels.reshape(b, h // patch, patch, w // patch, patch, c)
    return grid.transpose(0, 1, 3, 2, 4, 5).reshape(b, -1, patch * patch * c)


class DualEncoder:
    """Randomly initialised, freezable image and text encoders."""

    def __init__(self, cfg: BackboneConfig):
        cfg.validate()
        self.cfg = cfg
        self.params: Dict[str, Parameter] = {}
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        patch_dim = cfg.patch * cfg.patch * cfg.channels
        self.bos_id = cfg.vocab_size
        self.eos_id = cfg.vocab_size + 1

        self._gauss("vision.patch_proj.weight", (patch_dim, d), rng)
        self._const("vision.patch_proj.bias", (d,), 0.0)
        self._gauss("vision.cls", (d,), rng)
        self._gauss("vision.pos", (cfg.n_patches + 1, d), rng)
        self._gauss("text.token_embedding", (cfg.vocab_size + 2, d), rng)
        self._gauss("text.pos", (cfg.text_len, d), rng)
        for branch in BRANCHES:
            for layer in range(cfg.n_layers):
                self._init_block(f"{branch}.blocks.{layer}", rng)
            self._const(f"{branch}.ln_final.gamma", (d,), 1.0)
            self._const(f"{branch}.ln_final.beta", (d,), 0.0)

    def _gauss(self, name, shape, rng):
        data = rng.normal(0.0, self.cfg.init_std, size=shape)
        self.params[name] = Parameter(f"backbone.{name}", Tensor(data))

    def _const(self, name, shape, value):
        self.params[name] = Parameter(f"backbone.{name}", Tensor(np.full(shape, value)))

    def _init_block(self, prefix, rng):
        d, hidden = self.cfg.d_model, self.cfg.d_model * self.cfg.mlp_ratio
        for ln in ("ln1", "ln2"):
            self._const(f"{prefix}.{ln}.gamma", (d,), 1.0)
            self._const(f"{prefix}.{ln}.beta", (d,), 0.0)
        for proj in ("q", "k", "v", "out"):
            self._gauss(f"{prefix}.attn.{proj}.weight", (d, d), rng)
            self._const(f"{prefix}.attn.{proj}.bias", (d,), 0.0)
        self._gauss(f"{prefix}.mlp.fc1.weight", (d, hidden), rng)
        self._const(f"{prefix}.mlp.fc1.bias", (hidden,), 0.0)
        self._gauss(f"{prefix}.mlp.fc2.weight", (hidden, d), rng)
        self._const(f"{prefix}.mlp.fc2.bias", (d,), 0.0)

    def p(self, name: str) -> Tensor:
        return self.params[name].tensor

    def named_parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def freeze(self) -> None:
        for param in self.params.values():
            param.freeze()

    # ------------------------------------------------------------------
    # embeddings

    def embed_images(self, pixels: np.ndarray) -> Tensor:
        """(B, H, W, C) pixels -> (B, N+1, d) with [CLS] at position 0."""
        pixels = np.asarray(pixels, dtype=ad.get_default_dtype())
        if pixels.ndim != 4:
            raise DataError(f"expected (B, H, W, C) pixels, got shape {pixels.shape}")
        h, w = pixels.shape[1:3]
        if (h, w) != tuple(self.cfg.image_hw) or pixels.shape[3] != self.cfg.channels:
            if h % self.cfg.patch or w % self.cfg.patch:
                raise ConfigError(f"image {h}x{w} not divisible by patch {self.cfg.patch}")
            raise DataError(f"image shape {pixels.shape[1:]} does not match config")
        b = pixels.shape[0]
        tokens = ad.matmul(Tensor(patchify(pixels, self.cfg.patch)),
                           self.p("vision.patch_proj.weight"))
        tokens = ad.add_bias(tokens, self.p("vision.patch_proj.bias"))
        cls = ad.reshape(self.p("vision.cls"), (1, 1, -1))
        cls = ad.take(cls, np.zeros(b, dtype=np.intp), axis=0)
        seq = ad.concat([cls, tokens], axis=1)
        return ad.add(seq, ad.take(ad.reshape(self.p("vision.pos"), (1,) + self.p("vision.pos").shape),
                                   np.zeros(b, dtype=np.intp), axis=0))

    def embed_image(self, pixels: np.ndarray) -> TokenSequence:
        with ad.no_grad():
            seq = self.embed_images(np.asarray(pixels)[None])
        return TokenSequence(seq.data[0], {"cls": 0})

    def text_ids(self, token_ids: Sequence[int]) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.intp).reshape(-1)
        if ids.size > self.cfg.text_len - 2:
            raise DataError(f"caption of {ids.size} tokens exceeds text_len-2 = {self.cfg.text_len - 2}")
        bad = ids[(ids < 0) | (ids >= self.cfg.vocab_size)]
        if bad.size:
            raise DataError(f"token id {int(bad[0])} outside vocabulary of {self.cfg.vocab_size}")
        return np.concatenate([[self.bos_id], ids, [self.eos_id]]).astype(np.intp)

    def embed_texts(self, token_ids: np.ndarray) -> Tensor:
        """(B, L) caption ids of equal length -> (B, L+2, d) with [BOS]/[EOS] added."""
        token_ids = np.asarray(token_ids, dtype=np.intp)
        if token_ids.ndim != 2:
            raise DataError("embed_texts expects a (B, L) id array")
        full = np.stack([self.text_ids(row) for row in token_ids]) if len(token_ids) else \
            np.empty((0, token_ids.shape[1] + 2), dtype=np.intp)
        b, t = full.shape
        table = self.p("text.token_embedding")
        emb = ad.reshape(ad.take(table, full.reshape(-1), axis=0), (b, t, -1))
        pos = ad.take(self.p("text.pos"), np.arange(t), axis=0)
        pos = ad.take(ad.reshape(pos, (1, t, -1)), np.zeros(b, dtype=np.intp), axis=0)
        return ad.add(emb, pos)

    def embed_text(self, token_ids: Sequence[int]) -> TokenSequence:
        ids = np.asarray(token_ids, dtype=np.intp).reshape(1, -1)
        with ad.no_grad():
            seq = self.embed_texts(ids)
        return TokenSequence(seq.data[0], {"bos": 0, "eos": ids.shape[1] + 1})

    # ------------------------------------------------------------------
    # blocks

    def attention(self, x: Tensor, prefix: str, return_weights: bool = False):
        """Multi-head self-attention over (B, T, d) without masking."""
        b, t, d = x.shape
        heads = self.cfg.n_heads
        dh = d // heads

        def project(name):
            y = ad.add_bias(ad.matmul(x, self.p(f"{prefix}.attn.{name}.weight")),
                            self.p(f"{prefix}.attn.{name}.bias"))
            return ad.transpose(ad.reshape(y, (b, t, heads, dh)), (0, 2, 1, 3))

        q, k, v = project("q"), project("k"), project("v")
        scores = ad.scale(ad.bmm(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        weights = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.transpose(ad.bmm(weights, v), (0, 2, 1, 3)), (b, t, d))
        out = ad.add_bias(ad.matmul(ctx, self.p(f"{prefix}.attn.out.weight")),
                          self.p(f"{prefix}.attn.out.bias"))
        return (out, weights) if return_weights else out

    def mlp(self, x: Tensor, prefix: str) -> Tensor:
        h = ad.add_bias(ad.matmul(x, self.p(f"{prefix}.mlp.fc1.weight")),
                        self.p(f"{prefix}.mlp.fc1.bias"))
        return ad.add_bias(ad.matmul(ad.relu(h), self.p(f"{prefix}.mlp.fc2.weight")),
                           self.p(f"{prefix}.mlp.fc2.bias"))

    def transformer_block(self, x: Tensor, branch: str, layer: int,
                          adapter_hook: Optional[Hook] = None, adapter_input: str = "x"):
        """One pre-LN block. Returns ``(output, routing outcome or None)``."""
        if not 0 <= layer < self.cfg.n_layers:
            raise ValueError(f"layer {layer} out of range for {self.cfg.n_layers} layers")
        prefix = f"{branch}.blocks.{layer}"
        eps = self.cfg.ln_eps
        ln1 = ad.layer_norm(x, self.p(f"{prefix}.ln1.gamma"), self.p(f"{prefix}.ln1.beta"), eps)
        x = ad.add(x, self.attention(ln1, prefix))
        ln2 = ad.layer_norm(x, self.p(f"{prefix}.ln2.gamma"), self.p(f"{prefix}.ln2.beta"), eps)
        h_o = ad.add(x, self.mlp(ln2, prefix))
        if adapter_hook is None:
            return h_o, None
        return adapter_hook(x if adapter_input == "x" else ln2, h_o)

    def run_branch(self, seq: Tensor, branch: str, hooks: Optional[Sequence[Hook]] = None,
                   adapter_input: str = "x"):
        outcomes = []
        for layer in range(self.cfg.n_layers):
            hook = hooks[layer] if hooks is not None else None
            seq, outcome = self.transformer_block(seq, branch, layer, hook, adapter_input)
            if outcome is not None:
                outcomes.append(outcome)
        return seq, outcomes

    def pool(self, seq: Tensor, branch: str, positions: np.ndarray) -> Tensor:
        """Pick one row per sequence, final LN, then unit L2 norm."""
        b, t, d = seq.shape
        rows = np.arange(b) * t + positions
        picked = ad.take(ad.reshape(seq, (b * t, d)), rows, axis=0, unique=True)
        picked = ad.layer_norm(picked, self.p(f"{branch}.ln_final.gamma"),
                               self.p(f"{branch}.ln_final.beta"), self.cfg.ln_eps)
        return ad.l2_normalize(picked, axis=-1)

    def encode_images(self, pixels, hooks=None, adapter_input: str = "x"):
        seq = self.embed_images(pixels)
        seq, outcomes = self.run_branch(seq, "vision", hooks, adapter_input)
        return self.pool(seq, "vision", np.zeros(seq.shape[0], dtype=np.intp)), outcomes

    def encode_texts(self, token_ids, hooks=None, adapter_input: str = "x"):
        seq = self.embed_texts(token_ids)
        seq, outcomes = self.run_branch(seq, "text", hooks, adapter_input)
        eos = np.full(seq.shape[0], seq.shape[1] - 1, dtype=np.intp)
        return self.pool(seq, "text", eos), outcomes

    def encode_image(self, pixels) -> np.ndarray:
        with ad.no_grad():
            feats, _ = self.encode_images(np.asarray(pixels)[None])
        return feats.data[0]

    def encode_text(self, token_ids) -> np.ndarray:
        with ad.no_grad():
            feats, _ = self.encode_texts(np.asarray(token_ids, dtype=np.intp).reshape(1, -1))
        return feats.data[0]
