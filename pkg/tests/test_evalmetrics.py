"""Metric implementations against exhaustive oracles."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from baymeta.evalmetrics import (
    auprc,
    auroc,
    episode_report,
    f1_optimal,
    kcenter_coreset,
    nn_score,
    score_histogram,
)


# --------------------------------------------------------------------------
# oracles
# --------------------------------------------------------------------------

def auroc_pair_counting(scores, labels):
    """O(n^2) definition: fraction of (positive, negative) pairs ranked
    correctly, ties worth one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def f1_exhaustive(scores, labels):
    """Scan every candidate threshold (distinct scores plus +inf) directly."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    best_u, best_f1 = math.inf, 0.0
    candidates = sorted(set(scores), reverse=True) + [math.inf]
    for u in sorted(set(scores), reverse=True):
        pred = scores >= u
        tp = int(np.sum(pred & (labels == 1)))
        fp = int(np.sum(pred & (labels == 0)))
        fn = int(np.sum(~pred & (labels == 1)))
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        if f1 >= best_f1:  # descending thresholds: keep the smallest maximizer
            best_f1, best_u = f1, u
    del candidates
    return best_u, best_f1


def auprc_exhaustive(scores, labels):
    """Sweep all distinct thresholds descending; step-area accumulation."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_pos = int(labels.sum())
    area = 0.0
    prev_recall = 0.0
    for u in sorted(set(scores), reverse=True):
        pred = scores >= u
        tp = int(np.sum(pred & (labels == 1)))
        precision = tp / int(pred.sum())
        recall = tp / n_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def kcenter_radius(points, idx):
    return float(np.max(np.min(
        np.linalg.norm(points[:, None, :] - points[idx][None, :, :], axis=2), axis=1
    )))


def random_instance(rng, n_max=200):
    n = int(rng.integers(4, n_max + 1))
    # coarse grid of values forces plenty of ties
    scores = rng.integers(0, max(2, n // 3), size=n).astype(float)
    labels = rng.integers(0, 2, size=n)
    if labels.sum() == 0:
        labels[0] = 1
    if labels.sum() == n:
        labels[-1] = 0
    return scores, labels


class TestAuroc:
    def test_perfect_ranking(self):
        assert auroc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0

    def test_inverted_ranking(self):
        assert auroc([1, 2, 3, 4], [1, 1, 0, 0]) == 0.0

    def test_tied_pairs_worked_example(self):
        # pairs: (2,1)=1, (2,2)=1/2, (3,1)=1, (3,2)=1 over 4 pairs = 0.875
        assert auroc([1, 2, 2, 3], [0, 1, 0, 1]) == 0.875
        assert auroc_pair_counting([1, 2, 2, 3], [0, 1, 0, 1]) == 0.875

    def test_matches_pair_counting_exactly(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            scores, labels = random_instance(rng, n_max=60)
            assert auroc(scores, labels) == auroc_pair_counting(scores, labels)

    @settings(max_examples=200, deadline=None)
    @given(st.data())
    def test_pair_counting_property(self, data):
        n = data.draw(st.integers(4, 40))
        scores = data.draw(st.lists(
            st.integers(0, 8).map(float), min_size=n, max_size=n))
        labels = data.draw(st.lists(st.integers(0, 1), min_size=n, max_size=n))
        if sum(labels) in (0, n):
            labels[0] = 1 - labels[0]
        assert auroc(scores, labels) == auroc_pair_counting(scores, labels)

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(1)
        scores, labels = random_instance(rng)
        base = auroc(scores, labels)
        assert auroc(np.exp(scores / 3.0), labels) == base
        assert auroc(3 * scores + 7, labels) == base

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            auroc([1.0, 2.0], [1, 1])


class TestAuprc:
    def test_perfect_separation(self):
        assert auprc([1, 2, 5, 6], [0, 0, 1, 1]) == 1.0

    def test_fixed_six_point_case(self):
        scores = [3.0, 2.0, 2.0, 1.0, 0.5, 0.5]
        labels = [1, 0, 1, 0, 1, 0]
        assert auprc(scores, labels) == pytest.approx(
            auprc_exhaustive(scores, labels), rel=1e-15
        )

    def test_matches_exhaustive_sweep(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            scores, labels = random_instance(rng, n_max=50)
            assert auprc(scores, labels) == pytest.approx(
                auprc_exhaustive(scores, labels), rel=1e-12
            )

    def test_prevalence_floor_flagging(self):
        # the step-wise area can drop below prevalence, but only for
        # rankings no better than random; the guaranteed floor is the
        # adversarial ranking's area (all negatives ranked above all
        # positives), which every instance must respect exactly
        def worst_case_area(n_pos, n_neg):
            return sum(j / (n_neg + j) for j in range(1, n_pos + 1)) / n_pos

        rng = np.random.default_rng(3)
        for _ in range(500):
            scores, labels = random_instance(rng, n_max=40)
            prevalence = labels.sum() / len(labels)
            area = auprc(scores, labels)
            assert area >= worst_case_area(int(labels.sum()), int((1 - labels).sum())) - 1e-12
            if area < prevalence - 1e-12:
                assert auroc(scores, labels) < 0.6

    def test_worst_case_ranking_hits_the_floor(self):
        # labels [0, 0, 1, 1] by descending score: area = 1/3 * 1/2 + 1/2 * 1/2
        assert auprc([4.0, 3.0, 2.0, 1.0], [0, 0, 1, 1]) == pytest.approx(5.0 / 12.0)

    def test_all_positive_inputs_rejected_by_validation(self):
        # single-class (all anomalous) short-circuits to precision one
        assert auprc([0.5, 1.0], [1, 1]) == 1.0


class TestF1Optimal:
    def test_perfect_split(self):
        u, f1 = f1_optimal([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
        assert f1 == 1.0 and u == 0.8

    def test_all_positive(self):
        u, f1 = f1_optimal([0.3, 0.1, 0.7], [1, 1, 1])
        assert f1 == 1.0 and u == 0.1

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            scores, labels = random_instance(rng, n_max=40)
            u, f1 = f1_optimal(scores, labels)
            u_ref, f1_ref = f1_exhaustive(scores, labels)
            assert f1 == f1_ref
            assert u == u_ref

    def test_eight_point_tied_case(self):
        scores = [1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0, 4.0]
        labels = [0, 1, 0, 1, 1, 0, 1, 1]
        assert f1_optimal(scores, labels) == f1_exhaustive(scores, labels)

    def test_optimum_dominates_other_candidates(self):
        rng = np.random.default_rng(5)
        scores, labels = random_instance(rng, n_max=30)
        _, f1_star = f1_optimal(scores, labels)
        y = np.asarray(labels)
        for u in set(scores):
            pred = np.asarray(scores) >= u
            tp = int(np.sum(pred & (y == 1)))
            denom = 2 * tp + int(np.sum(pred & (y == 0))) + int(np.sum(~pred & (y == 1)))
            assert f1_star >= (2 * tp / denom if denom else 0.0)


class TestKCenter:
    def test_full_fraction_keeps_everything(self):
        pts = np.random.default_rng(6).standard_normal((7, 2))
        np.testing.assert_array_equal(kcenter_coreset(pts, 1.0), np.arange(7))

    def test_collinear_farthest_point(self):
        pts = np.array([[0.0], [1.0], [10.0]])
        idx = kcenter_coreset(pts, fraction=0.5, start=0)  # ceil(1.5) = 2
        assert set(idx) == {0, 2}

    def test_greedy_is_two_approximation_on_brute_force_case(self):
        rng = np.random.default_rng(7)
        pts = rng.standard_normal((10, 2))
        m = 3
        best = min(
            kcenter_radius(pts, np.array(sub))
            for sub in itertools.combinations(range(10), m)
        )
        idx = kcenter_coreset(pts, fraction=m / 10, start=0)
        assert len(idx) == m
        assert kcenter_radius(pts, idx) <= 2.0 * best + 1e-12

    def test_seeded_start_is_deterministic(self):
        pts = np.random.default_rng(8).standard_normal((20, 3))
        np.testing.assert_array_equal(
            kcenter_coreset(pts, 0.25, seed=3), kcenter_coreset(pts, 0.25, seed=3)
        )

    def test_validation(self):
        with pytest.raises(ValueError):
            kcenter_coreset(np.empty((0, 2)), 0.5)
        with pytest.raises(ValueError):
            kcenter_coreset(np.ones((3, 2)), 0.0)


class TestNNScore:
    def test_member_scores_zero(self):
        pts = np.random.default_rng(9).standard_normal((5, 3))
        assert nn_score(pts, pts[2]) == 0.0

    def test_singleton_coreset_unit_distance(self):
        assert nn_score(np.zeros((1, 3)), np.array([1.0, 0.0, 0.0])) == 1.0

    def test_matches_linear_scan(self):
        rng = np.random.default_rng(10)
        pts = rng.standard_normal((12, 4))
        queries = rng.standard_normal((8, 4))
        got = nn_score(pts, queries)
        want = np.array([min(np.linalg.norm(q - p) for p in pts) for q in queries])
        np.testing.assert_allclose(got, want, rtol=1e-12)


class TestAggregation:
    def test_mean_and_stderr_use_unbiased_variance(self):
        per_episode = [
            (np.array([0.0, 1.0, 2.0, 3.0]), np.array([0, 0, 1, 1])),
            (np.array([3.0, 2.0, 1.0, 0.0]), np.array([0, 0, 1, 1])),
            (np.array([0.0, 2.0, 1.0, 3.0]), np.array([0, 0, 1, 1])),
        ]
        report = episode_report(per_episode)
        vals = np.array([1.0, 0.0, 0.75])
        assert report.auroc.mean == pytest.approx(vals.mean())
        assert report.auroc.stderr == pytest.approx(vals.std(ddof=1) / math.sqrt(3))
        assert report.episode_count == 3

    def test_pooled_mode(self):
        per_episode = [
            (np.array([0.0, 1.0]), np.array([0, 1])),
            (np.array([5.0, 6.0]), np.array([0, 1])),
        ]
        pooled = episode_report(per_episode, pooled=True)
        assert pooled.episode_count == 1
        assert pooled.auroc.stderr == 0.0

    def test_rows_schema(self):
        report = episode_report([(np.array([0.0, 1.0]), np.array([0, 1]))])
        rows = report.as_rows("bayes", "family-x", "heavy-tail")
        assert [r[3] for r in rows] == ["auroc", "auprc", "f1_star"]
        assert all(len(r) == 7 for r in rows)

    def test_histogram_rows(self):
        rows = score_histogram(np.linspace(0, 1, 100), bins=10)
        assert len(rows) == 10
        assert sum(r[2] for r in rows) == 100
