"""Task generation, episodic sampling, and the generative-truth oracle."""

import numpy as np
import pytest
from scipy.stats import chi2, norm

from baymeta.episodes import (
    Episode,
    TaskFamily,
    TaskSpec,
    episode_stream_seed,
    gen_task,
    oracle_scores,
    sample_episode,
)
from baymeta.evalmetrics import auroc


class TestTaskGeneration:
    def test_deterministic(self):
        fam = TaskFamily(family_seed=11, heterogeneity=0.5)
        a = gen_task(fam, client_id=3, split="train", task_index=9)
        b = gen_task(fam, client_id=3, split="train", task_index=9)
        np.testing.assert_array_equal(a.normal_mean, b.normal_mean)
        assert a.anomaly_kind == b.anomaly_kind and a.task_seed == b.task_seed

    def test_homogeneous_limit(self):
        fam = TaskFamily(family_seed=5, heterogeneity=0.0)
        specs = [gen_task(fam, client_id=c, task_index=0) for c in range(6)]
        for spec in specs[1:]:
            np.testing.assert_array_equal(spec.normal_mean, specs[0].normal_mean)
            np.testing.assert_array_equal(spec.normal_cov, specs[0].normal_cov)

    def test_dispersion_scales_linearly(self):
        def dispersion(h):
            fam = TaskFamily(family_seed=5, heterogeneity=h, task_jitter=0.0)
            means = np.stack([gen_task(fam, client_id=c, task_index=0).normal_mean
                              for c in range(8)])
            center = means.mean(axis=0)
            return np.mean(np.sum((means - center) ** 2, axis=1))

        d1, d2 = dispersion(1.0), dispersion(2.0)
        assert d2 == pytest.approx(4.0 * d1, rel=1e-12)  # squared dispersion: x4

    def test_heldout_protocol(self):
        fam = TaskFamily(family_seed=7, heldout_kind="covariance-inflation")
        train_kinds = {gen_task(fam, 0, "train", i).anomaly_kind for i in range(40)}
        test_kinds = {gen_task(fam, 0, "test", i).anomaly_kind for i in range(40)}
        assert "covariance-inflation" not in train_kinds
        assert test_kinds == {"covariance-inflation"}
        assert len(train_kinds) == 2

    def test_single_kind_family_is_usable_everywhere(self):
        fam = TaskFamily(family_seed=7, kinds=("mean-shift",), heldout_kind="mean-shift")
        assert gen_task(fam, 0, "train", 0).anomaly_kind == "mean-shift"
        assert gen_task(fam, 0, "test", 0).anomaly_kind == "mean-shift"

    def test_validation(self):
        with pytest.raises(ValueError):
            TaskFamily(heterogeneity=-1.0)
        with pytest.raises(ValueError):
            TaskFamily(heldout_kind="nope")
        with pytest.raises(ValueError):
            TaskFamily(inflation=0.5)
        with pytest.raises(ValueError):
            gen_task(TaskFamily(), 0, split="holdout")

    def test_taskspec_validation(self):
        with pytest.raises(ValueError):
            TaskSpec(normal_mean=np.zeros(2), normal_cov=np.eye(2),
                     anomaly_kind="weird", anomaly_params={}, task_seed=0)
        with pytest.raises(np.linalg.LinAlgError):
            TaskSpec(normal_mean=np.zeros(2), normal_cov=-np.eye(2),
                     anomaly_kind="mean-shift", anomaly_params={}, task_seed=0)


class TestEpisodeSampling:
    def test_protocol_counts(self):
        task = gen_task(TaskFamily(family_seed=1), 0)
        ep = sample_episode(task, K=5, Q_N=12, Q_A=4, seed=0)
        assert ep.counts == (5, 12, 4)
        assert ep.support.shape == (5, 16)
        assert ep.query_x.shape == (16, 16)

    def test_no_anomalies_means_all_zero_labels(self):
        task = gen_task(TaskFamily(family_seed=2), 0)
        ep = sample_episode(task, K=3, Q_N=5, Q_A=0, seed=1)
        assert ep.query_y.sum() == 0

    def test_label_bookkeeping_over_many_draws(self):
        task = gen_task(TaskFamily(family_seed=3), 0)
        for seed in range(50):
            ep = sample_episode(task, K=4, Q_N=7, Q_A=3, seed=seed)
            assert int(ep.query_y.sum()) == 3
            assert int((ep.query_y == 0).sum()) == 7

    def test_deterministic_in_seed(self):
        task = gen_task(TaskFamily(family_seed=4), 0)
        a = sample_episode(task, 5, 12, 4, seed=17)
        b = sample_episode(task, 5, 12, 4, seed=17)
        np.testing.assert_array_equal(a.support, b.support)
        np.testing.assert_array_equal(a.query_x, b.query_x)

    def test_support_mean_obeys_law_of_large_numbers(self):
        fam = TaskFamily(family_seed=6, task_jitter=0.0)
        task = gen_task(fam, 0)
        n = 100_000
        draws = np.vstack([
            sample_episode(task, 10, 1, 0, seed=s).support for s in range(n // 10)
        ])
        emp = draws.mean(axis=0)
        tol = 3 * fam.base_scale / np.sqrt(n)
        assert np.abs(emp - task.normal_mean).max() < 3 * tol  # per-coordinate slack

    def test_invalid_counts(self):
        task = gen_task(TaskFamily(family_seed=1), 0)
        with pytest.raises(ValueError):
            sample_episode(task, 0, 5, 1, seed=0)
        with pytest.raises(ValueError):
            sample_episode(task, 3, 0, 1, seed=0)

    def test_seed_isolation_probability_transform(self):
        # first coordinate of the first support point across seeds should be
        # a fresh normal draw: its probability transform must look uniform
        fam = TaskFamily(family_seed=8, task_jitter=0.0)
        task = gen_task(fam, 0)
        firsts = np.array([
            sample_episode(task, 1, 1, 0, seed=s).support[0, 0] for s in range(200)
        ])
        u = norm.cdf(firsts, loc=task.normal_mean[0], scale=fam.base_scale)
        counts, _ = np.histogram(u, bins=10, range=(0, 1))
        stat = np.sum((counts - 20.0) ** 2 / 20.0)
        assert stat < chi2.ppf(0.99, df=9)

    def test_episode_validation(self):
        with pytest.raises(ValueError):
            Episode(support=np.zeros((2, 3)), query_x=np.zeros((2, 3)),
                    query_y=np.array([0, 2]))
        with pytest.raises(ValueError):
            Episode(support=np.zeros((2, 3)), query_x=np.zeros((2, 3)),
                    query_y=np.array([0]))


class TestAnomalyGenerators:
    @pytest.mark.parametrize("kind", ["mean-shift", "covariance-inflation", "heavy-tail"])
    def test_generators_separate_from_normals(self, kind):
        fam = TaskFamily(family_seed=9, kinds=(kind,), heldout_kind=kind,
                         shift=3.0, inflation=9.0)
        task = gen_task(fam, 0, "test", 0)
        ep = sample_episode(task, 5, 200, 200, seed=0)
        scores = oracle_scores(task, ep.query_x)
        assert auroc(scores, ep.query_y) > 0.75

    def test_mean_shift_oracle_matches_analytic_auroc(self):
        # likelihood-ratio scores of two equal-covariance Gaussians separated
        # by Mahalanobis distance m rank with AUROC = Phi(m / sqrt(2))
        shift = 2.0
        fam = TaskFamily(family_seed=10, kinds=("mean-shift",),
                         heldout_kind="mean-shift", shift=shift, task_jitter=0.0)
        task = gen_task(fam, 0, "test", 0)
        rng_acc = []
        labels_acc = []
        for s in range(200):
            ep = sample_episode(task, 1, 50, 50, seed=s)
            rng_acc.append(oracle_scores(task, ep.query_x))
            labels_acc.append(ep.query_y)
        got = auroc(np.concatenate(rng_acc), np.concatenate(labels_acc))
        expected = norm.cdf(shift / np.sqrt(2))
        assert got == pytest.approx(expected, abs=0.01)

    def test_heavy_tail_draws_have_heavier_tails(self):
        fam = TaskFamily(family_seed=12, kinds=("heavy-tail",),
                         heldout_kind="heavy-tail", tail_dof=2.0, task_jitter=0.0)
        task = gen_task(fam, 0, "test", 0)
        ep = sample_episode(task, 1, 2000, 2000, seed=0)
        d_norm = np.linalg.norm(ep.query_x[ep.query_y == 0] - task.normal_mean, axis=1)
        d_anom = np.linalg.norm(ep.query_x[ep.query_y == 1] - task.normal_mean, axis=1)
        assert np.quantile(d_anom, 0.95) > np.quantile(d_norm, 0.95) * 1.5


class TestStreamSeeds:
    def test_streams_are_stable_and_distinct(self):
        a = episode_stream_seed(42, 0, 7, "train")
        assert a == episode_stream_seed(42, 0, 7, "train")
        assert a != episode_stream_seed(42, 0, 8, "train")
        assert a != episode_stream_seed(42, 1, 7, "train")
        assert a != episode_stream_seed(42, 0, 7, "val")
        assert a != episode_stream_seed(43, 0, 7, "train")
