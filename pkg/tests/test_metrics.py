"""Retrieval metrics against brute-force definitions and worked fixtures."""

import itertools

import numpy as np
import pytest

from mtsgait.metrics import (evaluate, pairwise_distance,
                             write_per_query_csv, write_report_csv)

from conftest import rel_err


def embed_from_distances(dists):
    """1-D embeddings placed so euclidean distance to a zero query equals
    the requested values: a direct way to script a ranking."""
    return np.array(dists, dtype=np.float64).reshape(-1, 1, 1)


def brute_metrics(match_flags):
    """AP / INP / first-hit from an ordered relevance list, by definition."""
    ranks = [i + 1 for i, m in enumerate(match_flags) if m]
    num_pos = len(ranks)
    assert num_pos > 0
    precisions = [(k + 1) / rank for k, rank in enumerate(ranks)]
    return ranks[0], sum(precisions) / num_pos, num_pos / ranks[-1]


class TestWorkedFixtures:
    def test_single_probe_perfect_retrieval(self):
        report = evaluate([("a", "q")], embed_from_distances([0.0]),
                          [("a", "g1"), ("b", "g2")],
                          embed_from_distances([0.1, 0.2]), ks=(1,))
        assert report.rank_k[1] == 100.0
        assert report.mean_ap == 100.0
        assert report.mean_inp == 100.0

    def test_positives_at_ranks_one_and_three(self):
        # gallery distances 1..5 with positives at ranks 1 and 3
        gallery_ids = [("a", "g1"), ("b", "g2"), ("a", "g3"), ("c", "g4"),
                       ("d", "g5")]
        report = evaluate([("a", "q")], embed_from_distances([0.0]),
                          gallery_ids, embed_from_distances([1, 2, 3, 4, 5]),
                          ks=(1, 5))
        assert abs(report.mean_ap - 83.33) < 0.01
        assert abs(report.mean_inp - 66.67) < 0.01
        assert report.queries[0].first_hit_rank == 1

    def test_all_positives_first_scores_hundred(self):
        gallery_ids = [("a", "g1"), ("a", "g2"), ("b", "g3"), ("c", "g4")]
        report = evaluate([("a", "q")], embed_from_distances([0.0]),
                          gallery_ids, embed_from_distances([1, 2, 3, 4]))
        assert report.mean_ap == 100.0 and report.mean_inp == 100.0


class TestPermutationOracle:
    def test_exhaustive_five_item_galleries(self):
        # every placement of 2 positives among 5 ranked items
        base = embed_from_distances([1, 2, 3, 4, 5])
        for positives in itertools.combinations(range(5), 2):
            gallery_ids = [("a" if i in positives else f"n{i}", f"g{i}")
                           for i in range(5)]
            report = evaluate([("a", "q")], embed_from_distances([0.0]),
                              gallery_ids, base, ks=(1, 2, 3, 4, 5))
            flags = [i in positives for i in range(5)]
            first, ap, inp = brute_metrics(flags)
            assert report.queries[0].first_hit_rank == first
            assert rel_err(report.mean_ap, 100 * ap) < 1e-9
            assert rel_err(report.mean_inp, 100 * inp) < 1e-9
            for k in (1, 2, 3, 4, 5):
                assert report.rank_k[k] == (100.0 if first <= k else 0.0)

    def test_rank_k_monotone(self, rng):
        q = rng.standard_normal((6, 2, 4))
        g = rng.standard_normal((20, 2, 4))
        q_ids = [(f"s{i % 3}", f"q{i}") for i in range(6)]
        g_ids = [(f"s{i % 3}", f"g{i}") for i in range(20)]
        report = evaluate(q_ids, q, g_ids, g, ks=(1, 2, 5, 10, 20))
        values = [report.rank_k[k] for k in sorted(report.rank_k)]
        assert values == sorted(values)


class TestPairwiseDistance:
    def test_identical_vectors_zero_under_both(self, rng):
        x = rng.standard_normal((3, 2, 4))
        for metric in ("euclidean", "cosine"):
            d = pairwise_distance(x, x, metric)
            assert np.allclose(np.diag(d), 0.0, atol=1e-6)

    def test_orthogonal_unit_vectors_cosine_one(self):
        a = np.zeros((1, 1, 2))
        b = np.zeros((1, 1, 2))
        a[0, 0, 0] = 1.0
        b[0, 0, 1] = 1.0
        assert pairwise_distance(a, b, "cosine")[0, 0] == pytest.approx(1.0)

    def test_gallery_scaling_preserves_cosine_ranking(self, rng):
        q = rng.standard_normal((4, 2, 8))
        g = rng.standard_normal((10, 2, 8))
        base = pairwise_distance(q, g, "cosine")
        scaled = pairwise_distance(q, 3.7 * g, "cosine")
        for row_a, row_b in zip(base, scaled):
            np.testing.assert_array_equal(np.argsort(row_a, kind="stable"),
                                          np.argsort(row_b, kind="stable"))

    def test_zero_norm_vector_distance_one(self, caplog):
        q = np.zeros((1, 1, 3))
        g = np.ones((2, 1, 3))
        d = pairwise_distance(q, g, "cosine")
        np.testing.assert_allclose(d, 1.0)

    def test_euclidean_matches_direct_norm(self, rng):
        q = rng.standard_normal((3, 2, 4))
        g = rng.standard_normal((5, 2, 4))
        d = pairwise_distance(q, g, "euclidean")
        for i in range(3):
            for j in range(5):
                want = np.linalg.norm(q[i].reshape(-1) - g[j].reshape(-1))
                assert d[i, j] == pytest.approx(want, rel=1e-10)

    def test_unknown_metric(self, rng):
        with pytest.raises(ValueError):
            pairwise_distance(rng.standard_normal((1, 1, 2)),
                              rng.standard_normal((1, 1, 2)), "manhattan")


class TestEvaluateProtocol:
    def test_leave_one_out_excludes_self(self):
        ids = [("a", "q0"), ("a", "q1"), ("b", "q2"), ("b", "q3")]
        embs = embed_from_distances([0.0, 0.1, 5.0, 5.1])
        report = evaluate(ids, embs, ids, embs, ks=(1,))
        assert report.rank_k[1] == 100.0
        assert not report.excluded

    def test_probe_without_gallery_positive_is_excluded(self):
        report = evaluate(
            [("a", "q"), ("z", "q2")], embed_from_distances([0.0, 1.0]),
            [("a", "g1"), ("b", "g2")], embed_from_distances([0.5, 2.0]),
            ks=(1,))
        assert report.excluded == [("z", "q2")]
        assert len(report.queries) == 1

    def test_all_probes_excluded_is_an_error(self):
        with pytest.raises(ValueError, match="no probe subject"):
            evaluate([("z", "q")], embed_from_distances([0.0]),
                     [("a", "g")], embed_from_distances([1.0]))

    def test_chance_level_rank1(self, rng):
        # random embeddings: Rank-1 should land near positives/gallery
        subjects = 8
        per_subject = 4
        hits = []
        for seed in range(40):
            r = np.random.default_rng(seed)
            g_ids = [(f"s{i}", f"g{i}_{j}") for i in range(subjects)
                     for j in range(per_subject)]
            q_ids = [(f"s{i}", f"q{i}") for i in range(subjects)]
            report = evaluate(q_ids, r.standard_normal((subjects, 1, 8)),
                              g_ids,
                              r.standard_normal((len(g_ids), 1, 8)), ks=(1,))
            hits.append(report.rank_k[1] / 100)
        chance = per_subject / (subjects * per_subject)
        assert abs(np.mean(hits) - chance) < 0.08

    def test_report_files(self, tmp_path):
        report = evaluate([("a", "q")], embed_from_distances([0.0]),
                          [("a", "g1"), ("b", "g2")],
                          embed_from_distances([0.1, 0.2]),
                          ks=(1, 5, 10, 20))
        csv = tmp_path / "report.csv"
        write_report_csv(csv, report)
        lines = csv.read_text().splitlines()
        assert lines[0] == "rank1,rank5,rank10,rank20,map,minp"
        assert lines[1] == "100.00,100.00,100.00,100.00,100.00,100.00"
        per_query = tmp_path / "queries.csv"
        write_per_query_csv(per_query, report)
        assert per_query.read_text().splitlines()[0] == \
            "subject,sequence,first_hit_rank,ap,inp"
        table = report.text_table()
        assert "Rank-1" in table and "mAP" in table
