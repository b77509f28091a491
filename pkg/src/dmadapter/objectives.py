"""Similarity distribution matching and the combined training objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .moe import load_balance_loss


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class SdmConfig:
    tau: float = 0.02
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")


def match_distribution(identity_ids: Sequence[int]) -> np.ndarray:
    """Row ``i`` is uniform over the batch entries sharing identity ``i``."""
    ids = np.asarray(identity_ids)
    same = (ids[:, None] == ids[None, :]).astype(np.float64)
    return same / same.sum(axis=1, keepdims=True)


def _check_unit_rows(x: Tensor, name: str, atol: float = 1e-6) -> None:
    norms = np.linalg.norm(x.data, axis=1)
    if not np.allclose(norms, 1.0, atol=atol):
        raise ContractError(f"{name} rows must be unit-normalised (norms {norms.min():.6g}..{norms.max():.6g})")


def sdm_i2t(V: Tensor, T: Tensor, q: np.ndarray, cfg: SdmConfig = SdmConfig()) -> Tensor:
    """Mean over queries of KL(p_i || q_i + eps), p_i = softmax_j(V_i . T_j / tau)."""
    V, T = ad.as_tensor(V), ad.as_tensor(T)
    _check_unit_rows(V, "V")
    _check_unit_rows(T, "T")
    n = V.shape[0]
    logits = ad.scale(ad.matmul(V, ad.transpose(T)), 1.0 / cfg.tau)
    log_p = ad.log_softmax(logits, axis=1)
    p = ad.exp(log_p)
    with np.errstate(divide="ignore"):
        log_q = np.log(np.asarray(q, dtype=V.data.dtype) + cfg.epsilon)
    return ad.scale(ad.sum_(ad.mul(p, ad.sub(log_p, Tensor(log_q)))), 1.0 / n)


def sdm_bidirectional(V: Tensor, T: Tensor, q: np.ndarray, cfg: SdmConfig = SdmConfig()) -> Tensor:
    """Image-to-text plus text-to-image; the second direction uses ``q`` transposed."""
    q = np.asarray(q)
    return ad.add(sdm_i2t(V, T, q, cfg), sdm_i2t(T, V, q.T, cfg))


def total_loss(sdm, lb_image, lb_text, alpha: float) -> Tensor:
    """``sdm + alpha * (lb_image + lb_text)``; the only place alpha is applied."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    sdm = ad.as_tensor(sdm)
    if alpha == 0:
        return sdm
    return ad.add(sdm, ad.scale(ad.add(ad.as_tensor(lb_image), ad.as_tensor(lb_text)), alpha))


def branch_lb(outcomes) -> Tensor:
    """Mean load-balancing loss over one branch's hooked layers (0 if none)."""
    if not outcomes:
        return Tensor(0.0)
    total = load_balance_loss(outcomes[0])
    for outcome in outcomes[1:]:
        total = ad.add(total, load_balance_loss(outcome))
    return ad.scale(total, 1.0 / len(outcomes))
