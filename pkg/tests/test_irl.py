import json
import math

import numpy as np
import pytest

from lanechange.errors import ConfigError, NotPositiveDefiniteError
from lanechange.evaluation import mee
from lanechange.features import (ALL_FEATURES, BASELINE, NormalizationConstants, RewardFunction, ThetaWeights,
                                 normalization_from)
from lanechange.irl import (DatasetLikelihood, FitSettings, PerFeatureDerivatives, fit, grid_points,
                            hyperparameter_sweep, load_grid, log_likelihood, log_likelihood_grad,
                            per_feature_derivatives)
from lanechange.prediction import scenario_unpredictability
from lanechange.synth import SceneSpec, make_expert, make_scene, reference_normalization
from lanechange.trajopt import OptimizerSettings, optimize, reward_of

from tests.helpers import central_difference, random_scene

LOG_2PI = math.log(2.0 * math.pi)


def _parts(gradients, hessians, names=None):
    gradients, hessians = np.asarray(gradients, dtype=float), np.asarray(hessians, dtype=float)
    names = names or tuple(f'phi{i}' for i in range(gradients.shape[0]))
    return PerFeatureDerivatives('test', tuple(names), gradients, hessians)


def _theta(parts, values):
    return ThetaWeights(parts.names, values)


def _random_parts(rng, p=3, d_u=6):
    gradients = rng.normal(size=(p, d_u))
    hessians = []
    for _ in range(p):
        a = rng.normal(size=(d_u, d_u))
        hessians.append(-(a @ a.T + np.eye(d_u)))
    return _parts(gradients, hessians)


class TestLogLikelihood:
    def test_flat_gradient_unit_curvature(self):
        parts = _parts(np.zeros((1, 2)), [-np.eye(2)])
        likelihood = log_likelihood(parts, _theta(parts, [1.0]))
        assert likelihood.loglik == pytest.approx(-LOG_2PI)
        assert likelihood.lam == 0.0

    def test_curvature_term(self):
        parts = _parts(np.zeros((1, 2)), [-np.diag([4.0, 1.0])])
        likelihood = log_likelihood(parts, _theta(parts, [1.0]))
        assert likelihood.loglik == pytest.approx(0.5 * math.log(4.0) - LOG_2PI)

    def test_gradient_term(self):
        parts = _parts([[1.0, 0.0]], [-np.diag([2.0, 1.0])])
        likelihood = log_likelihood(parts, _theta(parts, [1.0]))
        assert likelihood.loglik == pytest.approx(-0.25 + 0.5 * math.log(2.0) - LOG_2PI)

    def test_matches_dense_formula(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            parts = _random_parts(rng)
            theta = _theta(parts, rng.uniform(0.1, 2.0, 3))
            g, H = parts.assemble(theta)
            _, logdet = np.linalg.slogdet(-H)
            expected = 0.5 * g @ np.linalg.solve(H, g) + 0.5 * logdet - 0.5 * len(g) * LOG_2PI
            assert log_likelihood(parts, theta).loglik == pytest.approx(expected, rel=1e-9)

    def test_cholesky_factor(self):
        parts = _random_parts(np.random.default_rng(1))
        likelihood = log_likelihood(parts, _theta(parts, [1.0, 1.0, 1.0]))
        _, logdet = np.linalg.slogdet(-likelihood.H)
        assert 2.0 * np.sum(np.log(np.diag(likelihood.L))) == pytest.approx(logdet)
        np.testing.assert_allclose(likelihood.L @ likelihood.L.T, -likelihood.H, atol=1e-10)

    def test_regularization_ladder(self):
        parts = _parts(np.zeros((1, 2)), [np.diag([-1.0, 5e-9])])
        likelihood = log_likelihood(parts, _theta(parts, [1.0]))
        assert likelihood.lam == 1e-8
        assert likelihood.lambda_history == (0.0, 1e-8)

    def test_positive_curvature_cannot_be_regularized(self):
        parts = _parts(np.zeros((1, 2)), [np.diag([-1.0, 2.0])])
        with pytest.raises(NotPositiveDefiniteError) as excinfo:
            log_likelihood(parts, _theta(parts, [1.0]))
        assert excinfo.value.details['lambda_history'] == [0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0]


class TestLikelihoodGradient:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            parts = _random_parts(rng)
            values = rng.uniform(0.2, 2.0, 3)
            gradient = log_likelihood_grad(parts, _theta(parts, values))
            oracle = central_difference(lambda v: log_likelihood(parts, _theta(parts, v)).loglik, values, h=1e-6)
            np.testing.assert_allclose(gradient, oracle, rtol=1e-6, atol=1e-6)

    def test_duplicate_features_share_gradient(self):
        rng = np.random.default_rng(3)
        base = _random_parts(rng, p=2)
        parts = _parts(np.vstack([base.gradients, base.gradients[:1]]),
                       np.concatenate([base.hessians, base.hessians[:1]]))
        split = log_likelihood(parts, _theta(parts, [0.4, 1.0, 0.6]))
        merged = log_likelihood(parts, _theta(parts, [1.0, 1.0, 0.0]))
        assert split.loglik == pytest.approx(merged.loglik)
        gradient = log_likelihood_grad(parts, _theta(parts, [0.4, 1.0, 0.6]))
        assert gradient[0] == pytest.approx(gradient[2])

    def test_dataset_sum(self):
        rng = np.random.default_rng(4)
        parts = _random_parts(rng)
        values = np.array([0.5, 1.0, 1.5])
        single_value, single_grad = DatasetLikelihood([parts])(values)
        double_value, double_grad = DatasetLikelihood([parts, parts])(values)
        assert double_value == pytest.approx(2.0 * single_value)
        np.testing.assert_allclose(double_grad, 2.0 * single_grad)

    def test_weights_must_match_derivatives(self):
        parts = _random_parts(np.random.default_rng(5))
        with pytest.raises(ConfigError):
            log_likelihood(parts, ThetaWeights(('other',), [1.0]))


class TestPerFeatureDerivatives:
    def test_match_finite_differences(self, cfg, identity_norm):
        scene = random_scene(seed=3, K=5)
        parts = per_feature_derivatives(scene, cfg, identity_norm)
        function = RewardFunction(scene, cfg, identity_norm)
        u = np.array(scene.ego.controls).reshape(-1)
        np.testing.assert_allclose(parts.gradients, central_difference(function.sums, u, h=1e-5), atol=1e-4)
        hessians = central_difference(function.jacobian, u, h=1e-5)
        np.testing.assert_allclose(parts.hessians, 0.5 * (hessians + np.swapaxes(hessians, 1, 2)), atol=1e-4)

    def test_turning_hessian(self, cfg, identity_norm):
        scene = random_scene(seed=4, K=5)
        parts = per_feature_derivatives(scene, cfg, identity_norm)
        hessian = parts.hessians[parts.names.index('a')]
        expected = np.diag(np.tile([0.0, -2.0], scene.K))
        np.testing.assert_allclose(hessian, expected, atol=1e-12)

    def test_speed_gradient(self, cfg, identity_norm):
        scene = random_scene(seed=5, K=5)
        parts = per_feature_derivatives(scene, cfg, identity_norm)
        gradient = parts.gradients[parts.names.index('v')].reshape(-1, 2)
        np.testing.assert_allclose(gradient[:, 0], -2.0 * (scene.ego.controls[:, 0] - scene.v_d), atol=1e-10)
        np.testing.assert_allclose(gradient[:, 1], 0.0, atol=1e-12)

    def test_variant_restricts_features(self, cfg, identity_norm, scene):
        parts = per_feature_derivatives(scene, cfg, identity_norm, variant='baseline')
        assert parts.names == BASELINE
        assert parts.gradients.shape == (5, 2 * scene.K)
        assert parts.hessians.shape == (5, 2 * scene.K, 2 * scene.K)

    @pytest.mark.parametrize('seed', range(50))
    def test_every_feature_matches_finite_differences(self, seed, cfg, identity_norm):
        scene = random_scene(seed=seed, K=10)
        z = scenario_unpredictability(scene, 2)
        parts = per_feature_derivatives(scene, cfg, identity_norm, z=z)
        assert parts.names == ALL_FEATURES
        function = RewardFunction(scene, cfg, identity_norm, z)
        u = np.array(scene.ego.controls).reshape(-1)
        gradients = central_difference(function.sums, u, h=1e-5)
        hessians = central_difference(function.jacobian, u, h=1e-5)
        hessians = 0.5 * (hessians + np.swapaxes(hessians, 1, 2))
        for index, name in enumerate(parts.names):
            np.testing.assert_allclose(parts.gradients[index], gradients[index], atol=1e-4, rtol=1e-4, err_msg=name)
            np.testing.assert_allclose(parts.hessians[index], hessians[index], atol=1e-4, rtol=1e-4, err_msg=name)


class TestBaselineReduction:
    """The full model with zero unpredictability weights is the baseline model"""

    @pytest.fixture
    def setup(self, cfg):
        scenes = [make_scene(SceneSpec(K=10), seed) for seed in range(10)]
        z_series = [scenario_unpredictability(scene, 2) for scene in scenes]
        full = normalization_from(scenes, cfg, 'unpred', z_series)
        base = ThetaWeights(BASELINE, [1.0, 0.5, 2.0, 0.7, 0.3])
        return scenes, z_series, full, base

    def test_rewards_agree(self, setup, cfg):
        scenes, z_series, full, base = setup
        for scene, z in zip(scenes, z_series):
            value5, gradient5 = reward_of(scene.ego, scene, base, cfg, full.restricted(BASELINE))
            value7, gradient7 = reward_of(scene.ego, scene, base.restricted(ALL_FEATURES), cfg, full, z)
            assert value5 == value7
            np.testing.assert_array_equal(gradient5, gradient7)

    def test_likelihoods_agree(self, setup, cfg):
        scenes, z_series, full, base = setup
        for scene, z in zip(scenes, z_series):
            parts5 = per_feature_derivatives(scene, cfg, full.restricted(BASELINE))
            parts7 = per_feature_derivatives(scene, cfg, full, z=z)
            loglik5 = log_likelihood(parts5, base).loglik
            loglik7 = log_likelihood(parts7, base.restricted(ALL_FEATURES)).loglik
            assert loglik7 == pytest.approx(loglik5, rel=1e-10, abs=1e-10)

    def test_generated_trajectories_agree(self, setup, cfg):
        scenes, z_series, full, base = setup
        settings = OptimizerSettings(max_iter=100)
        for scene, z in zip(scenes, z_series):
            plan5 = optimize(scene, base, cfg, full.restricted(BASELINE), settings)
            plan7 = optimize(scene, base.restricted(ALL_FEATURES), cfg, full, settings, z=z)
            np.testing.assert_allclose(plan7.trajectory.controls, plan5.trajectory.controls, atol=1e-10)
            np.testing.assert_allclose(plan7.trajectory.states, plan5.trajectory.states, atol=1e-10)


@pytest.fixture
def experts(cfg):
    """Three short scenes with experts optimal under known weights"""
    scenes = [make_scene(SceneSpec(K=10), seed) for seed in range(3)]
    norm = reference_normalization(scenes, cfg, 'baseline')
    theta_star = ThetaWeights(BASELINE, [1.0, 2.0, 1.0, 0.5, 0.5])
    settings = OptimizerSettings(max_iter=200)
    return [make_expert(scene, theta_star, cfg, norm, seed=i, settings=settings)
            for i, scene in enumerate(scenes)], norm


class TestFit:
    def test_no_iterations_returns_initial_weights(self, experts, cfg):
        scenarios, norm = experts
        result = fit(scenarios, 'baseline', cfg, FitSettings(max_iter=0), normalization=norm)
        np.testing.assert_array_equal(result.theta.values, result.report['initial_theta'])
        assert np.all(result.theta.values == result.theta.values[0])
        assert result.report['n_iterations'] == 0
        assert result.report['final_grad_norm'] is None
        json.dumps(result.report, allow_nan=False)

    def test_report_loglik_never_decreases(self, experts, cfg):
        scenarios, norm = experts
        result = fit(scenarios, 'baseline', cfg, FitSettings(max_iter=15), normalization=norm)
        logliks = [entry['loglik'] for entry in result.report['iterations']]
        assert all(later >= earlier for earlier, later in zip(logliks, logliks[1:]))
        assert result.report['final_loglik'] == logliks[-1]
        assert np.all(result.theta.values >= 0)
        assert np.all(result.theta.values <= 1000.0)
        assert result.report['scenario_ids'] == [scenario.id for scenario in scenarios]

    def test_needs_scenarios(self, cfg):
        with pytest.raises(ConfigError):
            fit([], 'baseline', cfg)

    def test_normalization_from_training_experts(self, experts, cfg):
        scenarios, _ = experts
        result = fit(scenarios, 'baseline', cfg, FitSettings(max_iter=1))
        assert result.normalization.names == BASELINE
        assert np.all(result.normalization.maximum >= result.normalization.minimum)

    def test_invalid_settings(self):
        with pytest.raises(ConfigError):
            FitSettings(max_iter=-1)
        with pytest.raises(ConfigError):
            FitSettings(lambda_ladder=[1.0, 0.0])


class TestSweep:
    def test_grid_file(self, tmp_path):
        path = tmp_path / 'grid.toml'
        path.write_text('c_p = [1, 10]\nt_p = 2.5\n')
        assert load_grid(path) == {'t_p': [2.5], 'c_p': [1.0, 10.0]}

    def test_unknown_grid_key(self, tmp_path):
        path = tmp_path / 'grid.toml'
        path.write_text('speed = [1, 2]\n')
        with pytest.raises(ConfigError):
            load_grid(path)

    def test_empty_grid(self):
        with pytest.raises(ConfigError):
            grid_points({})
        with pytest.raises(ConfigError):
            grid_points({'c_p': []})

    def test_grid_points_order(self):
        points = grid_points({'c_f': [1.0, 2.0], 'c': [0.5, 1.0]})
        assert [(point.c, point.c_f) for point in points] == [(0.5, 1.0), (0.5, 2.0), (1.0, 1.0), (1.0, 2.0)]

    def test_ties_prefer_smaller_unpredictability_weights(self, experts, cfg):
        scenarios, _ = experts
        selected, fitted, rows = hyperparameter_sweep(scenarios[:2], 'baseline', {'c_p': [10.0, 1.0]}, cfg,
                                                      FitSettings(max_iter=5), OptimizerSettings(max_iter=20))
        assert rows[0]['avg_mee'] == rows[1]['avg_mee']
        assert selected.c_p == 1.0
        assert fitted.report['selected']['c_p'] == 1.0


@pytest.mark.slow
def test_recovers_known_weights(cfg):
    scenes = [make_scene(SceneSpec(K=30), seed) for seed in range(50)]
    norm = reference_normalization(scenes, cfg, 'baseline')
    theta_star = ThetaWeights(BASELINE, [1.0, 2.0, 1.0, 0.5, 0.5])
    scenarios = [make_expert(scene, theta_star, cfg, norm, seed=i) for i, scene in enumerate(scenes)]
    result = fit(scenarios, 'baseline', cfg, normalization=norm, jobs=4)

    recovered, expected = result.theta.normalized(), theta_star.normalized()
    cosine = recovered @ expected / (np.linalg.norm(recovered) * np.linalg.norm(expected))
    assert cosine > 0.9

    errors = [mee(optimize(scenario, result.theta, cfg, norm).trajectory, scenario.ego) for scenario in scenarios]
    assert np.mean(errors) < 0.3
