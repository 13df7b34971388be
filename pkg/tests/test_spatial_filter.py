import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from spdreg.exceptions import (ConfigError, DegenerateLabelsError,
                               EmptyClassError, IllConditionedError,
                               ShapeError)
from spdreg.spatial_filter import (FS2_FILTERS, FS3_FILTERS, FilterConfig,
                                   FuzzyPartition, SpatialFilterBank,
                                   apply_filter, build_partition,
                                   class_covariances,
                                   class_covariances_from_scatter,
                                   rayleigh_quotients, solve_filters,
                                   train_filter_bank)
from spdreg.trial import Trial

from conftest import spd_from_normal


def random_trials(rng, n=40, c=6, s=200):
    return [Trial(rng.standard_normal((c, s)), float(y))
            for y in rng.uniform(0.3, 1.0, n)]


class TestPartition:
    def test_points_k3(self):
        p = build_partition(np.arange(10.0), 3)
        np.testing.assert_array_equal(p.percentile_points, [25, 50, 75])

    def test_points_k10(self):
        p = build_partition(np.arange(50.0), 10)
        np.testing.assert_allclose(p.percentile_points,
                                   100 * np.arange(1, 11) / 11, rtol=0)

    def test_uniform_grid_values(self):
        p = build_partition(np.arange(101.0), 3)
        np.testing.assert_allclose(p.percentile_values, [25, 50, 75],
                                   atol=1.0)

    def test_degenerate(self):
        with pytest.raises(DegenerateLabelsError):
            build_partition([1.0, 1.0, 2.0], 3)

    def test_triangle_shape(self):
        p = FuzzyPartition(np.array([25.0, 50, 75]), np.array([1.0, 2, 4]))
        mu = p.membership([0.0, 1.0, 1.5, 2.0, 3.0, 4.0, 9.0])
        expected = [[1, 0, 0], [1, 0, 0], [0.5, 0.5, 0], [0, 1, 0],
                    [0, 0.5, 0.5], [0, 0, 1], [0, 0, 1]]
        np.testing.assert_allclose(mu, expected, atol=1e-15)

    @given(st.lists(st.floats(0.1, 2.0), min_size=12, max_size=60),
           st.integers(2, 10), st.floats(-1.0, 3.0))
    def test_partition_of_unity(self, labels, k, probe):
        if len(set(labels)) < k + 1:
            return
        p = build_partition(labels, k)
        mu = p.membership(np.r_[labels, probe])
        assert np.all((mu >= 0) & (mu <= 1))
        np.testing.assert_allclose(mu.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(np.diff(p.percentile_values) >= 0)

    @given(st.floats(0.01, 100.0))
    def test_scale_equivariance(self, c):
        labels = np.random.default_rng(3).uniform(0.2, 1.5, 50)
        a = build_partition(labels, 4).percentile_values
        b = build_partition(c * labels, 4).percentile_values
        np.testing.assert_allclose(b, c * a, rtol=1e-12)


class TestClassCovariances:
    def test_single_class_is_mean(self, rng):
        trials = random_trials(rng, n=5)
        part = FuzzyPartition(np.array([50.0]), np.array([0.5]))
        covs = class_covariances(trials, part)
        oracle = np.mean([t.data @ t.data.T for t in trials], axis=0)
        np.testing.assert_allclose(covs[0], oracle, rtol=1e-12)

    def test_one_trial(self, rng):
        t = random_trials(rng, n=1)[0]
        part = FuzzyPartition(np.array([100 / 3, 200 / 3]),
                              np.array([0.0, 2.0]))
        covs = class_covariances([t], part)
        assert np.all(part.membership(t.label) > 0)
        for k in range(2):
            np.testing.assert_allclose(covs[k], t.data @ t.data.T,
                                       rtol=1e-12)

    def test_one_trial_leaves_far_classes_empty(self, rng):
        t = random_trials(rng, n=1)[0]
        part = FuzzyPartition(np.array([25.0, 50, 75]),
                              np.array([0.0, 0.5, 2.0]))
        with pytest.raises(EmptyClassError):
            class_covariances([t], part)

    def test_hard_memberships(self, rng):
        x1, x2 = rng.standard_normal((2, 4, 50))
        part = FuzzyPartition(np.array([100 / 3, 200 / 3]),
                              np.array([0.0, 1.0]))
        scatter = np.stack([x1 @ x1.T, x2 @ x2.T])
        covs = class_covariances_from_scatter(scatter, [0.0, 1.0], part)
        np.testing.assert_allclose(covs[0], x1 @ x1.T)
        np.testing.assert_allclose(covs[1], x2 @ x2.T)

    def test_empty_class(self, rng):
        part = FuzzyPartition(np.array([100 / 3, 200 / 3]),
                              np.array([0.0, 1.0]))
        with pytest.raises(EmptyClassError):
            class_covariances_from_scatter(np.stack([np.eye(2)] * 2),
                                           [-1.0, -2.0], part)


class TestSolveFilters:
    def test_diagonal_pencil(self):
        covs = np.stack([np.diag([4.0, 1.0]), np.eye(2)])
        w, ev = solve_filters(covs, 1)
        np.testing.assert_allclose(w[:, 0], [1.0, 0.0], atol=1e-12)
        assert ev[0, 0] == pytest.approx(4.0)

    def test_identical_classes(self, rng):
        a = spd_from_normal(rng, 5)
        _, ev = solve_filters(np.stack([a, a]), 3)
        np.testing.assert_allclose(ev, 1.0, rtol=1e-10)
        # against a rest-sum of K - 1 copies the ratio is 1 / (K - 1)
        _, ev = solve_filters(np.stack([a, a, a]), 3)
        np.testing.assert_allclose(ev, 0.5, rtol=1e-10)

    @pytest.mark.parametrize("k", [2, 3, 10])
    def test_eigen_residual(self, rng, k):
        c, f = 12, 3
        covs = np.stack([spd_from_normal(rng, c) for _ in range(k)])
        w, ev = solve_filters(covs, f)
        total = covs.sum(axis=0)
        for i in range(k):
            rest = total - covs[i]
            for j in range(f):
                v = w[:, i * f + j]
                res = covs[i] @ v - ev[i, j] * rest @ v
                assert np.linalg.norm(res) <= 1e-8 * np.linalg.norm(
                    covs[i] @ v)

    def test_matches_scipy_pencil(self, rng):
        covs = np.stack([spd_from_normal(rng, 6) for _ in range(3)])
        _, ev = solve_filters(covs, 6)
        oracle = scipy.linalg.eigh(covs[1], covs[0] + covs[2],
                                   eigvals_only=True)[::-1]
        np.testing.assert_allclose(ev[1], oracle, rtol=1e-10)

    def test_sign_and_norm(self, rng):
        covs = np.stack([spd_from_normal(rng, 6) for _ in range(3)])
        w, ev = solve_filters(covs, 4)
        np.testing.assert_allclose(np.linalg.norm(w, axis=0), 1.0)
        assert np.all(w[0] > 0)
        assert np.all(np.diff(ev, axis=1) <= 0)

    def test_singular_rest(self):
        covs = np.stack([np.eye(3), np.diag([1.0, 0, 0]),
                         np.diag([1.0, 0, 0])])
        with pytest.raises(IllConditionedError):
            solve_filters(covs, 1)
        w, _ = solve_filters(covs, 1, shrinkage=0.1)
        assert np.all(np.isfinite(w))

    def test_f_above_channels(self, rng):
        with pytest.raises(ConfigError):
            solve_filters(np.stack([np.eye(3)] * 2), 4)
        with pytest.raises(ConfigError):
            FilterConfig(3, 10).check_channels(8)


class TestBank:
    def test_defaults(self):
        assert (FS2_FILTERS.k_classes, FS2_FILTERS.filters_per_class) == (3, 10)
        assert (FS3_FILTERS.k_classes, FS3_FILTERS.filters_per_class) == (10, 3)

    def test_rayleigh_matches_eigenvalues(self, rng):
        bank = train_filter_bank(random_trials(rng), FilterConfig(3, 2))
        np.testing.assert_allclose(rayleigh_quotients(bank),
                                   bank.eigenvalues, rtol=1e-8)
        assert bank.weights.shape == (6, 6)

    def test_apply_shapes(self, rng):
        c = 62
        w = rng.standard_normal((c, 30))
        bank = SpatialFilterBank(w, FS2_FILTERS, None, np.zeros((3, 10)))
        t = Trial(rng.standard_normal((c, 1250)), 0.5, 7.0)
        out = apply_filter(bank, t)
        assert out.data.shape == (30, 1250)
        assert (out.label, out.onset_time) == (0.5, 7.0)
        np.testing.assert_allclose(out.data, w.T @ t.data, atol=1e-12)

    def test_identity_bank(self, rng):
        bank = SpatialFilterBank(np.eye(4), FilterConfig(2, 2), None,
                                 np.zeros((2, 2)))
        x = rng.standard_normal((4, 20))
        np.testing.assert_array_equal(apply_filter(bank, x), x)

    def test_shape_mismatch(self, rng):
        bank = SpatialFilterBank(np.eye(4), FilterConfig(2, 2), None,
                                 np.zeros((2, 2)))
        with pytest.raises(ShapeError):
            apply_filter(bank, Trial(np.zeros((3, 10)), 1.0))

    def test_filtered_covariance_consistency(self, rng):
        bank = train_filter_bank(random_trials(rng), FilterConfig(2, 3))
        x = rng.standard_normal((6, 300))
        xf = apply_filter(bank, x)
        w = bank.weights
        np.testing.assert_allclose(xf @ xf.T / 300, w.T @ (x @ x.T / 300) @ w,
                                   atol=1e-10)

    def test_serialization_roundtrip(self, rng, tmp_path):
        bank = train_filter_bank(random_trials(rng), FilterConfig(3, 2))
        bank.save(tmp_path / "bank.json")
        back = SpatialFilterBank.load(tmp_path / "bank.json")
        np.testing.assert_array_equal(back.weights, bank.weights)
        np.testing.assert_array_equal(back.eigenvalues, bank.eigenvalues)
        np.testing.assert_array_equal(back.partition.percentile_values,
                                      bank.partition.percentile_values)
        assert back.config == bank.config
