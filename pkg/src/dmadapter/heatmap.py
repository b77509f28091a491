"""Per-token expert weights of one adapter layer, as a grid and an SVG."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .backbone import BRANCHES
from .model import DMAdapterModel


def expert_weights(model: DMAdapterModel, inputs, branch: str = "text",
                   layer: Optional[int] = None) -> np.ndarray:
    """(tokens x experts) gate weights for one caption or one image."""
    if model.adapter is None:
        raise ValueError("model has no adapter layers")
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
    n_layers = model.backbone.cfg.n_layers
    layer = n_layers - 1 if layer is None else layer
    if not 0 <= layer < n_layers:
        raise ValueError(f"layer {layer} outside [0, {n_layers})")
    with ad.no_grad():
        if branch == "text":
            ids = np.asarray(inputs, dtype=np.intp).reshape(1, -1)
            _, outcomes = model.encode_texts(ids)
        else:
            pixels = np.asarray(inputs)
            _, outcomes = model.encode_images(pixels[None] if pixels.ndim == 3 else pixels[:1])
    return outcomes[layer].weights.data.astype(np.float64)


def _row_labels(model: DMAdapterModel, inputs, branch: str, n_rows: int):
    if branch == "text":
        return ["[BOS]"] + [str(int(t)) for t in np.asarray(inputs).reshape(-1)] + ["[EOS]"]
    return ["[CLS]"] + [f"patch {i}" for i in range(n_rows - 1)]


def export_expert_heatmap(model: DMAdapterModel, inputs, out_dir, branch: str = "text",
                          layer: Optional[int] = None) -> Tuple[Path, Path]:
    """Write ``heatmap_<branch>_L<layer>.txt`` and ``.svg``; returns both paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n_layers = model.backbone.cfg.n_layers
    layer = n_layers - 1 if layer is None else layer
    weights = expert_weights(model, inputs, branch, layer)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = out_dir / f"heatmap_{branch}_L{layer}"
    txt = stem.with_suffix(".txt")
    np.savetxt(txt, weights, fmt="%.10f", delimiter=" ",
               header=f"rows=tokens cols=experts branch={branch} layer={layer}")

    labels = _row_labels(model, inputs, branch, weights.shape[0])
    fig, axis = plt.subplots(figsize=(1.0 + 0.6 * weights.shape[1], 1.0 + 0.3 * weights.shape[0]))
    image = axis.imshow(weights, cmap="viridis", vmin=0.0, vmax=1.0, aspect="auto")
    axis.set_xticks(range(weights.shape[1]))
    axis.set_xticklabels([f"E{i}" for i in range(weights.shape[1])])
    axis.set_yticks(range(weights.shape[0]))
    axis.set_yticklabels(labels, fontsize=7)
    axis.set_title(f"{branch} layer {layer}")
    fig.colorbar(image, ax=axis)
    fig.tight_layout()
    svg = stem.with_suffix(".svg")
    fig.savefig(svg, format="svg")
    plt.close(fig)
    return txt, svg


def load_grid(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path))
