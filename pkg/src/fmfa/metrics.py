"""Retrieval quality metrics for cross-modal evaluation.

Rankings sort gallery items by descending similarity; equal scores keep
ascending gallery index order, so results are deterministic under ties.
Average precision is accumulated per query in rank order with plain
sequential addition, which keeps the values reproducible down to the
last bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import as_matrix

__all__ = ["RetrievalReport", "rank_k", "mean_average_precision", "retrieval_report"]


def _validate(similarity, query_ids, gallery_ids):
    sims = as_matrix(similarity, "similarity")
    q_ids = np.asarray(query_ids)
    g_ids = np.asarray(gallery_ids)
    if q_ids.shape != (sims.shape[0],):
        raise ValueError(f"expected {sims.shape[0]} query ids, got shape {q_ids.shape}")
    if g_ids.shape != (sims.shape[1],):
        raise ValueError(f"expected {sims.shape[1]} gallery ids, got shape {g_ids.shape}")
    return sims, q_ids, g_ids


def _ranked_matches(sims, q_ids, g_ids, query: int) -> np.ndarray:
    # Stable sort of the negated row: descending similarity, ties by
    # ascending gallery index.
    order = np.argsort(-sims[query], kind="stable")
    matches = g_ids[order] == q_ids[query]
    if not matches.any():
        raise ValueError(f"query {query} has no matching gallery item")
    return matches


def rank_k(similarity, query_ids, gallery_ids, k: int) -> float:
    """Fraction of queries with a correct item among the top k."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    sims, q_ids, g_ids = _validate(similarity, query_ids, gallery_ids)
    hits = 0
    for query in range(sims.shape[0]):
        matches = _ranked_matches(sims, q_ids, g_ids, query)
        if matches[:k].any():
            hits += 1
    return hits / sims.shape[0]


def mean_average_precision(similarity, query_ids, gallery_ids) -> float:
    """Mean over queries of average precision at the match positions."""
    sims, q_ids, g_ids = _validate(similarity, query_ids, gallery_ids)
    total = 0.0
    for query in range(sims.shape[0]):
        matches = _ranked_matches(sims, q_ids, g_ids, query)
        found = 0
        precision_sum = 0.0
        for rank, hit in enumerate(matches, start=1):
            if hit:
                found += 1
                precision_sum += found / rank
        total += precision_sum / found
    return total / sims.shape[0]


@dataclass(frozen=True)
class RetrievalReport:
    rank1: float
    rank5: float
    rank10: float
    map_score: float
    num_queries: int

    def to_dict(self) -> dict:
        return {
            "rank1": self.rank1,
            "rank5": self.rank5,
            "rank10": self.rank10,
            "map": self.map_score,
            "num_queries": self.num_queries,
        }


def retrieval_report(similarity, query_ids, gallery_ids) -> RetrievalReport:
    return RetrievalReport(
        rank1=rank_k(similarity, query_ids, gallery_ids, 1),
        rank5=rank_k(similarity, query_ids, gallery_ids, 5),
        rank10=rank_k(similarity, query_ids, gallery_ids, 10),
        map_score=mean_average_precision(similarity, query_ids, gallery_ids),
        num_queries=np.asarray(query_ids).shape[0],
    )
