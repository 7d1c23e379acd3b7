"""Tests for the Rank-K and mean-average-precision retrieval metrics."""
from __future__ import annotations

import numpy as np
import pytest

from fmfa.metrics import (
    RetrievalReport,
    mean_average_precision,
    rank_k,
    retrieval_report,
)


def brute_force_ap(similarity, query_ids, gallery_ids, query):
    """Independent average precision: explicit sort with tuple keys."""
    row = similarity[query]
    order = sorted(range(len(gallery_ids)), key=lambda j: (-row[j], j))
    hits = [gallery_ids[j] == query_ids[query] for j in order]
    found = 0
    precision_sum = 0.0
    for rank, hit in enumerate(hits, start=1):
        if hit:
            found += 1
            precision_sum += found / rank
    return precision_sum / found


class TestRankK:
    def test_identity_similarity_perfect(self):
        ids = np.arange(4)
        assert rank_k(np.eye(4), ids, ids, 1) == 1.0

    def test_reversed_similarity_worst_case(self):
        ids = np.arange(10)
        sims = -np.eye(10)  # the matching item scores strictly lowest
        assert rank_k(sims, ids, ids, 1) == 0.0
        assert rank_k(sims, ids, ids, 10) == 1.0

    def test_handcrafted_two_queries(self):
        # query 0 ranks its match first; query 1 has it at rank 2
        sims = np.array([[0.9, 0.1, 0.2], [0.8, 0.7, 0.1]])
        query_ids = np.array([0, 1])
        gallery_ids = np.array([0, 1, 2])
        assert rank_k(sims, query_ids, gallery_ids, 1) == 0.5
        assert rank_k(sims, query_ids, gallery_ids, 5) == 1.0

    def test_monotone_in_k(self):
        rng = np.random.default_rng(80)
        sims = rng.standard_normal((6, 8))
        query_ids = rng.integers(0, 4, 6)
        gallery_ids = np.concatenate([np.arange(4), rng.integers(0, 4, 4)])
        values = [rank_k(sims, query_ids, gallery_ids, k) for k in range(1, 9)]
        assert all(a <= b for a, b in zip(values, values[1:]))

    def test_ties_break_by_ascending_gallery_index(self):
        sims = np.array([[0.5, 0.9, 0.9]])
        # the tied non-match sits at the lower index, so it wins the tie
        assert rank_k(sims, np.array([1]), np.array([9, 2, 1]), 1) == 0.0
        assert rank_k(sims, np.array([1]), np.array([9, 1, 2]), 1) == 1.0

    def test_k_below_one_rejected(self):
        with pytest.raises(ValueError, match="k must be at least 1"):
            rank_k(np.eye(2), np.arange(2), np.arange(2), 0)

    def test_matchless_query_rejected(self):
        with pytest.raises(ValueError, match="query 1 has no matching"):
            rank_k(np.eye(2), np.array([0, 5]), np.array([0, 1]), 1)

    def test_id_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="expected 2 query ids"):
            rank_k(np.eye(2), np.arange(3), np.arange(2), 1)


class TestMeanAveragePrecision:
    def test_perfect_ranking(self):
        ids = np.arange(5)
        assert mean_average_precision(np.eye(5), ids, ids) == 1.0

    def test_single_match_at_rank_two(self):
        sims = np.array([[0.9, 0.8, 0.2, 0.1]])
        value = mean_average_precision(sims, np.array([1]), np.array([0, 1, 2, 3]))
        assert value == 0.5

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(81)
        for _ in range(20):
            sims = rng.standard_normal((3, 7))
            gallery_ids = np.concatenate([np.arange(3), rng.integers(0, 3, 4)])
            query_ids = np.arange(3)
            expected = np.mean([brute_force_ap(sims, query_ids, gallery_ids, q)
                                for q in range(3)])
            value = mean_average_precision(sims, query_ids, gallery_ids)
            np.testing.assert_allclose(value, expected, rtol=0, atol=1e-12)

    def test_one_when_all_matches_ranked_first(self):
        sims = np.array([[0.9, 0.8, 0.1], [0.2, 0.9, 0.8]])
        query_ids = np.array([0, 1])
        # query 0: match at rank 1; query 1: matches at ranks 1 and 2
        gallery_ids = np.array([0, 1, 1])
        assert mean_average_precision(sims, query_ids, gallery_ids) == 1.0

    def test_below_one_when_a_non_match_intervenes(self):
        sims = np.array([[0.9, 0.8, 0.7]])
        value = mean_average_precision(sims, np.array([0]), np.array([0, 9, 0]))
        assert value < 1.0
        np.testing.assert_allclose(value, (1.0 + 2.0 / 3.0) / 2.0, rtol=1e-12)


class TestMetricInvariances:
    def test_increasing_transform_leaves_metrics(self):
        rng = np.random.default_rng(82)
        sims = rng.uniform(-1.0, 1.0, (5, 6))
        query_ids = rng.integers(0, 3, 5)
        gallery_ids = np.concatenate([np.arange(3), rng.integers(0, 3, 3)])
        warped = np.exp(3.0 * sims)  # strictly increasing
        for k in (1, 3):
            assert rank_k(sims, query_ids, gallery_ids, k) == \
                rank_k(warped, query_ids, gallery_ids, k)
        assert mean_average_precision(sims, query_ids, gallery_ids) == \
            mean_average_precision(warped, query_ids, gallery_ids)

    def test_gallery_permutation_consistency(self):
        rng = np.random.default_rng(83)
        sims = rng.standard_normal((4, 6))  # ties have measure zero
        query_ids = rng.integers(0, 3, 4)
        gallery_ids = np.concatenate([np.arange(3), rng.integers(0, 3, 3)])
        perm = rng.permutation(6)
        for k in (1, 2, 5):
            assert rank_k(sims, query_ids, gallery_ids, k) == \
                rank_k(sims[:, perm], query_ids, gallery_ids[perm], k)
        assert mean_average_precision(sims, query_ids, gallery_ids) == pytest.approx(
            mean_average_precision(sims[:, perm], query_ids, gallery_ids[perm]),
            abs=1e-12)


class TestRetrievalReport:
    def test_composes_all_metrics(self):
        ids = np.arange(4)
        report = retrieval_report(np.eye(4), ids, ids)
        assert report == RetrievalReport(rank1=1.0, rank5=1.0, rank10=1.0,
                                         map_score=1.0, num_queries=4)

    def test_rank_order_invariant(self):
        rng = np.random.default_rng(84)
        sims = rng.standard_normal((5, 5))
        ids = rng.integers(0, 3, 5)
        gallery = np.concatenate([np.arange(3), rng.integers(0, 3, 2)])
        report = retrieval_report(sims, ids, gallery)
        assert report.rank1 <= report.rank5 <= report.rank10
        assert 0.0 <= report.map_score <= 1.0

    def test_to_dict_keys(self):
        ids = np.arange(2)
        payload = retrieval_report(np.eye(2), ids, ids).to_dict()
        assert payload == {"rank1": 1.0, "rank5": 1.0, "rank10": 1.0,
                           "map": 1.0, "num_queries": 2}
