"""Text-to-image retrieval metrics: Rank-k and mean average precision.

Ranking sorts similarities in descending order; equal scores keep the lower
gallery index first.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .config import DataError


@dataclass
class RetrievalReport:
    rank1: float
    rank5: float
    rank10: float
    map: float
    n_queries: int
    n_gallery: int
    seed: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def ranking(sim: np.ndarray) -> np.ndarray:
    """Gallery indices per query, best first (stable on ties)."""
    return np.argsort(-np.asarray(sim), axis=1, kind="stable")


def _relevance(sim, query_ids, gallery_ids) -> np.ndarray:
    sim = np.asarray(sim)
    query_ids, gallery_ids = np.asarray(query_ids), np.asarray(gallery_ids)
    if sim.shape != (len(query_ids), len(gallery_ids)):
        raise ValueError(f"similarity shape {sim.shape} vs {len(query_ids)} queries, "
                         f"{len(gallery_ids)} gallery items")
    if not np.all(np.isfinite(sim)):
        raise ValueError("similarities must be finite")
    order = ranking(sim)
    return gallery_ids[order] == query_ids[:, None]


def rank_k(sim, query_ids, gallery_ids, k: int) -> float:
    """Fraction of queries with a correct match among the top ``k``."""
    n_gallery = np.asarray(sim).shape[1]
    if not 1 <= k <= n_gallery:
        raise ValueError(f"k={k} outside [1, {n_gallery}]")
    rel = _relevance(sim, query_ids, gallery_ids)
    return float(rel[:, :k].any(axis=1).mean())


def mean_ap(sim, query_ids, gallery_ids) -> float:
    rel = _relevance(sim, query_ids, gallery_ids)
    hits = rel.sum(axis=1)
    missing = np.nonzero(hits == 0)[0]
    if missing.size:
        raise DataError(f"query {int(missing[0])} has no matching gallery item")
    ranks = np.arange(1, rel.shape[1] + 1)
    precision = np.cumsum(rel, axis=1) / ranks
    ap = (precision * rel).sum(axis=1) / hits
    return float(ap.mean())


def evaluate_similarity(sim, query_ids, gallery_ids, seed: int = 0) -> RetrievalReport:
    g = np.asarray(sim).shape[1]
    return RetrievalReport(
        rank1=rank_k(sim, query_ids, gallery_ids, min(1, g)),
        rank5=rank_k(sim, query_ids, gallery_ids, min(5, g)),
        rank10=rank_k(sim, query_ids, gallery_ids, min(10, g)),
        map=mean_ap(sim, query_ids, gallery_ids),
        n_queries=len(query_ids),
        n_gallery=g,
        seed=seed,
    )
