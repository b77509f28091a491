"""Seeded identity-grounded image/caption pairs for retrieval experiments.

Every identity owns a latent attribute vector in [-1, 1)^A. An image paints
attribute ``a`` as ``value * pattern_a`` into grid cell ``a`` (one cell per
patch); a caption emits one token per attribute by quantising the value into
``vocab_size // A`` levels. Images and captions get independent Gaussian noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np

from .config import BackboneConfig, ConfigError, DataConfig

CODEBOOK_SEED = 20240101
_MAX_TRIES = 200_000


@dataclass
class Split:
    name: str
    images: np.ndarray          # (M, H, W, C)
    image_ids: np.ndarray       # (M,) identity per image
    captions: np.ndarray        # (P, L) token ids
    caption_ids: np.ndarray     # (P,) identity per caption
    caption_image: np.ndarray   # (P,) index of the image each caption describes

    @property
    def n_pairs(self) -> int:
        return len(self.captions)

    def pair(self, i: int):
        return self.images[self.caption_image[i]], self.captions[i], int(self.caption_ids[i])


@dataclass
class SyntheticDataset:
    train: Split
    test: Split
    attributes: Dict[int, np.ndarray]

    def split(self, name: str) -> Split:
        if name not in ("train", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)


def sample_attributes(n: int, n_attributes: int, gap: float,
                      rng: np.random.Generator) -> np.ndarray:
    """``n`` points in [-1, 1)^A with pairwise L-inf distance >= gap."""
    if gap > 0:
        capacity = math.ceil(2.0 / gap) ** n_attributes
        if n > capacity:
            raise ConfigError(f"{n} identities exceed attribute capacity {capacity} at gap {gap}")
    points: List[np.ndarray] = []
    tries = 0
    while len(points) < n:
        tries += 1
        if tries > _MAX_TRIES:
            raise ConfigError(f"could not place {n} identities at gap {gap}")
        cand = rng.uniform(-1.0, 1.0, size=n_attributes)
        if points and np.abs(np.asarray(points) - cand).max(axis=1).min() < gap:
            continue
        points.append(cand)
    return np.asarray(points)


def codebook(n_attributes: int, patch: int, channels: int) -> np.ndarray:
    """Fixed per-attribute sign patterns, shape (A, patch, patch, C)."""
    rng = np.random.default_rng(CODEBOOK_SEED)
    return rng.choice([-1.0, 1.0], size=(n_attributes, patch, patch, channels))


def render_image(attrs: np.ndarray, patterns: np.ndarray, bb: BackboneConfig,
                 noise: float, rng: np.random.Generator) -> np.ndarray:
    h, w = bb.image_hw
    p = bb.patch
    img = np.zeros((h, w, bb.channels))
    cols = w // p
    for a, value in enumerate(attrs):
        r, c = divmod(a, cols)
        img[r * p:(r + 1) * p, c * p:(c + 1) * p] = value * patterns[a]
    if noise > 0:
        img += rng.normal(0.0, noise, size=img.shape)
    return img


def emit_caption(attrs: np.ndarray, levels: int, noise: float,
                 rng: np.random.Generator) -> np.ndarray:
    values = attrs + (rng.normal(0.0, noise, size=attrs.shape) if noise > 0 else 0.0)
    q = np.floor((np.clip(values, -1.0, 1.0) + 1.0) / 2.0 * levels).astype(np.int64)
    q = np.clip(q, 0, levels - 1)
    return np.arange(len(attrs)) * levels + q


def _build_split(name, ids, attributes, cfg: DataConfig, bb, patterns, levels, rng) -> Split:
    images, image_ids, captions, caption_ids, caption_image = [], [], [], [], []
    for ident in ids:
        for _ in range(cfg.imgs_per_id):
            img_idx = len(images)
            images.append(render_image(attributes[ident], patterns, bb, cfg.noise, rng))
            image_ids.append(ident)
            for _ in range(cfg.caps_per_img):
                captions.append(emit_caption(attributes[ident], levels, cfg.noise, rng))
                caption_ids.append(ident)
                caption_image.append(img_idx)
    return Split(name, np.asarray(images), np.asarray(image_ids), np.asarray(captions),
                 np.asarray(caption_ids), np.asarray(caption_image))


def generate_dataset(cfg: DataConfig, bb: BackboneConfig) -> SyntheticDataset:
    """Deterministic train/test splits with disjoint identity sets."""
    cfg.validate()
    bb.validate()
    if cfg.n_attributes != bb.n_patches:
        raise ConfigError(f"n_attributes {cfg.n_attributes} must equal patch count {bb.n_patches}")
    levels = bb.vocab_size // cfg.n_attributes
    if levels < 2:
        raise ConfigError(f"vocab {bb.vocab_size} too small for {cfg.n_attributes} attributes")
    if cfg.n_attributes > bb.text_len - 2:
        raise ConfigError("captions do not fit in text_len")
    rng = np.random.default_rng(cfg.seed)
    total = cfg.num_ids + cfg.num_test_ids
    attrs = sample_attributes(total, cfg.n_attributes, cfg.gap, rng)
    attributes = {i: attrs[i] for i in range(total)}
    patterns = codebook(cfg.n_attributes, bb.patch, bb.channels)
    train = _build_split("train", range(cfg.num_ids), attributes, cfg, bb, patterns, levels, rng)
    test = _build_split("test", range(cfg.num_ids, total), attributes, cfg, bb, patterns, levels, rng)
    return SyntheticDataset(train, test, attributes)


# ----------------------------------------------------------------------
# manifest


def write_image(path: Path, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(np.asarray(image.shape, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(image, dtype="<f8").tobytes())


def read_image(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    shape = tuple(np.frombuffer(raw[:12], dtype="<i4"))
    return np.frombuffer(raw[12:], dtype="<f8").reshape(shape).copy()


def export_manifest(dataset: SyntheticDataset, out_dir) -> Path:
    """Write images as binary files and one JSON line per caption/image pair."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    pair_id = 0
    with open(manifest, "w") as fh:
        for split in (dataset.train, dataset.test):
            for i, img in enumerate(split.images):
                write_image(out_dir / "images" / f"{split.name}_{i:05d}.bin", img)
            for p in range(split.n_pairs):
                rec = {
                    "pair_id": pair_id,
                    "identity": int(split.caption_ids[p]),
                    "split": split.name,
                    "image_path": f"images/{split.name}_{int(split.caption_image[p]):05d}.bin",
                    "token_ids": [int(t) for t in split.captions[p]],
                }
                fh.write(json.dumps(rec) + "\n")
                pair_id += 1
    return manifest


def load_manifest(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
