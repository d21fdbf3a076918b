"""Score functions: Mahalanobis against a brute-force oracle, ODIN reductions."""

import math

import numpy as np
import pytest

from cadet.errors import ConditioningError, ConfigError, DataError, ShapeError
from cadet.net import NetworkSpec, pack
from cadet.scores import (
    MahalanobisParams,
    MaxSoftmaxParams,
    OdinParams,
    apply_odin_perturbation,
    fit_mahalanobis,
    fit_odin_grid,
    mahalanobis_score,
    mahalanobis_scores,
    max_softmax_scores,
    odin_score,
    odin_scores,
    perturb_input,
    rank_auroc,
    score_samples,
    temperature_scale,
)


def brute_force_mahalanobis(v, params):
    """Independent oracle: explicit per-class solve, then max."""
    cov = params.pooled_cov + params.ridge * np.eye(params.pooled_cov.shape[0])
    best = -np.inf
    for mu in params.means:
        d = np.asarray(v, dtype=float) - mu
        best = max(best, float(-d @ np.linalg.solve(cov, d)))
    return best


def linear_net(W, b=None):
    W = np.asarray(W, dtype=float)
    spec = NetworkSpec((W.shape[1], W.shape[0]), "tanh", init_seed=0)
    theta = pack([(W, np.zeros(W.shape[0]) if b is None else np.asarray(b))], spec)
    return theta, spec


class TestFitMahalanobis:
    def test_zero_within_class_deviation(self):
        params = fit_mahalanobis({0: [[0.0, 0.0]], 1: [[2.0, 2.0]]}, ridge=1e-6)
        np.testing.assert_array_equal(params.means, [[0, 0], [2, 2]])
        np.testing.assert_array_equal(params.pooled_cov, np.zeros((2, 2)))
        np.testing.assert_allclose(
            params.precision, np.eye(2) / 1e-6, rtol=1e-9
        )

    def test_hand_pooled_covariance(self):
        params = fit_mahalanobis(
            {0: [[0.0, 0.0], [2.0, 0.0]], 1: [[4.0, 0.0], [6.0, 0.0]]}, ridge=0.0
        )
        np.testing.assert_array_equal(params.means, [[1, 0], [5, 0]])
        np.testing.assert_array_equal(params.pooled_cov, [[1.0, 0.0], [0.0, 0.0]])

    def test_duplication_invariance(self):
        groups = {0: [[0.0, 1.0], [2.0, -1.0]], 1: [[5.0, 5.0], [7.0, 3.0]]}
        doubled = {c: rows + rows for c, rows in groups.items()}
        a = fit_mahalanobis(groups, 1e-6)
        b = fit_mahalanobis(doubled, 1e-6)
        np.testing.assert_allclose(a.means, b.means)
        np.testing.assert_allclose(a.pooled_cov, b.pooled_cov)

    def test_empty_class_raises(self):
        with pytest.raises(DataError):
            fit_mahalanobis({0: [], 1: [[1.0, 1.0]]})

    def test_singular_surfaces_at_scoring(self):
        params = fit_mahalanobis(
            {0: [[0.0, 0.0], [2.0, 0.0]], 1: [[4.0, 0.0], [6.0, 0.0]]}, ridge=0.0
        )
        with pytest.raises(ConditioningError):
            mahalanobis_score([1.0, 0.0], params)


class TestMahalanobisScore:
    def fixture(self):
        return MahalanobisParams(
            (0, 1), np.array([[0.0, 0.0], [4.0, 0.0]]), np.eye(2), 0.0
        )

    def test_zero_at_class_mean(self):
        params = fit_mahalanobis(
            {0: [[0.0, 1.0], [1.0, 0.0]], 1: [[5.0, 4.0], [4.0, 5.0]]}, 1e-6
        )
        assert mahalanobis_score(params.means[0], params) == pytest.approx(0.0, abs=1e-9)

    def test_unit_covariance_distances(self):
        params = self.fixture()
        assert mahalanobis_score([1.0, 0.0], params) == pytest.approx(-1.0)
        assert mahalanobis_score([2.0, 0.0], params) == pytest.approx(-4.0)

    def test_always_nonpositive(self):
        rng = np.random.default_rng(3)
        params = fit_mahalanobis(
            {c: rng.normal(size=(5, 3)) + c for c in range(3)}, 1e-6
        )
        scores = mahalanobis_scores(rng.normal(scale=4, size=(200, 3)), params)
        assert np.all(scores <= 0)

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(17)
        for _ in range(30):
            groups = {c: rng.normal(size=(6, 4)) + 3 * c for c in range(3)}
            params = fit_mahalanobis(groups, ridge=1e-6)
            for v in rng.normal(scale=3, size=(5, 4)):
                assert mahalanobis_score(v, params) == pytest.approx(
                    brute_force_mahalanobis(v, params), abs=1e-9
                )

    def test_class_permutation_invariance(self):
        rng = np.random.default_rng(19)
        groups = {c: rng.normal(size=(4, 3)) + 2 * c for c in range(3)}
        a = fit_mahalanobis(groups, 1e-6)
        b = fit_mahalanobis({2: groups[2], 0: groups[0], 1: groups[1]}, 1e-6)
        v = rng.normal(size=3)
        assert mahalanobis_score(v, a) == pytest.approx(mahalanobis_score(v, b), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            mahalanobis_score([1.0, 2.0, 3.0], self.fixture())


class TestTemperatureScale:
    def test_t1_is_softmax(self):
        rng = np.random.default_rng(23)
        z = rng.normal(size=5)
        from cadet.net import softmax

        np.testing.assert_array_equal(temperature_scale(z, 1.0), softmax(z))

    def test_hand_computed(self):
        p = temperature_scale([2.0, 0.0], 2.0)
        e = math.exp(1.0)
        np.testing.assert_allclose(p, [e / (e + 1), 1 / (e + 1)], rtol=1e-12)

    def test_uniform_limit(self):
        p = temperature_scale([123.0, -45.0], 1e9)
        np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-6)

    def test_rejects_nonpositive_temperature(self):
        with pytest.raises(ConfigError):
            temperature_scale([1.0, 0.0], 0.0)


class TestPerturbation:
    def test_epsilon_zero_is_identity(self):
        theta, spec = linear_net(np.eye(2))
        x = np.array([0.3, -0.4])
        np.testing.assert_array_equal(
            perturb_input(x, theta, spec, OdinParams(1.0, 0.0)), x
        )

    def test_stubbed_gradient_arithmetic(self):
        out = apply_odin_perturbation([0.0, 0.0], [1.0, -1.0], 0.1)
        np.testing.assert_allclose(out, [0.1, -0.1], rtol=1e-15)

    def test_zero_gradient_is_identity(self):
        out = apply_odin_perturbation([0.5, 0.5], [0.0, 0.0], 0.1)
        np.testing.assert_array_equal(out, [0.5, 0.5])

    def test_moves_toward_higher_confidence(self):
        # perturbation increases the top temperature-scaled probability
        theta, spec = linear_net([[1.0, -0.5], [-0.3, 0.8]])
        params = OdinParams(10.0, 0.05)
        rng = np.random.default_rng(29)
        for x in rng.normal(size=(20, 2)):
            before = odin_score(x, theta, spec, OdinParams(10.0, 0.0))
            after = odin_score(x, theta, spec, params)
            assert after >= before - 1e-12


class TestOdinScore:
    def test_reduces_to_max_softmax(self):
        rng = np.random.default_rng(31)
        spec = NetworkSpec((3, 4, 3), "tanh", init_seed=8)
        theta = spec.init_params() + rng.normal(0, 0.3, spec.param_count)
        X = rng.normal(size=(100, 3))
        odin = odin_scores(X, theta, spec, OdinParams(1.0, 0.0))
        np.testing.assert_array_equal(odin, max_softmax_scores(X, theta, spec))

    def test_hand_computed_nine_tenths(self):
        theta, spec = linear_net(np.eye(2))
        s = odin_score([math.log(9.0), 0.0], theta, spec, OdinParams(1.0, 0.0))
        assert s == pytest.approx(0.9, rel=1e-12)

    def test_uniform_limit_one_over_k(self):
        theta, spec = linear_net(np.eye(4))
        s = odin_score([3.0, -1.0, 0.0, 2.0], theta, spec, OdinParams(1e9, 0.0))
        assert s == pytest.approx(0.25, abs=1e-6)

    def test_scores_in_unit_interval(self):
        rng = np.random.default_rng(37)
        spec = NetworkSpec((2, 5, 3), "relu", init_seed=2)
        theta = spec.init_params()
        s = odin_scores(rng.normal(size=(50, 2)), theta, spec, OdinParams(100.0, 0.002))
        assert np.all((s > 0) & (s <= 1))


class TestDispatchAndGrid:
    def test_score_samples_dispatch(self):
        rng = np.random.default_rng(41)
        spec = NetworkSpec((2, 3, 2), "tanh", init_seed=4)
        theta = spec.init_params()
        X = rng.normal(size=(10, 2))
        maha = fit_mahalanobis({0: [[0.0, 0.0]], 1: [[1.0, 1.0]]}, 1e-3)
        assert score_samples(X, theta, spec, maha).shape == (10,)
        assert score_samples(X, theta, spec, OdinParams(10.0, 0.0)).shape == (10,)
        np.testing.assert_array_equal(
            score_samples(X, theta, spec, MaxSoftmaxParams()),
            max_softmax_scores(X, theta, spec),
        )

    def test_rank_auroc_perfect_and_chance(self):
        assert rank_auroc([2.0, 3.0], [0.0, 1.0]) == 1.0
        assert rank_auroc([1.0, 1.0], [1.0, 1.0]) == 0.5

    def test_grid_prefers_larger_temperature_on_ties(self):
        # two classes, eps=0: every temperature ranks identically
        theta, spec = linear_net(np.array([[2.0, 0.0], [0.0, 2.0]]))
        rng = np.random.default_rng(43)
        X_in = rng.normal(size=(40, 2)) + np.array([3.0, 0.0])
        X_out = rng.normal(size=(40, 2)) * 3
        params = fit_odin_grid(theta, spec, X_in, X_out, epsilons=(0.0,))
        assert params.temperature == 1000.0

    def test_grid_is_deterministic(self):
        theta, spec = linear_net(np.array([[1.0, 0.2], [-0.4, 1.0]]))
        rng = np.random.default_rng(47)
        X_in = rng.normal(size=(30, 2))
        X_out = rng.normal(size=(30, 2)) + 2
        a = fit_odin_grid(theta, spec, X_in, X_out)
        b = fit_odin_grid(theta, spec, X_in, X_out)
        assert a == b
