import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lanechange.errors import ConfigError, InvalidValueError, ParseError
from lanechange.features import (ALL_FEATURES, BASELINE, FeatureConfig, FeatureVector, ModelArtifact,
                                 NormalizationConstants, RewardFunction, ThetaWeights, feature_steps, feature_sums,
                                 normalization_from, normalize, phi_a, phi_d, phi_f, phi_fz, phi_p, phi_pz, phi_v,
                                 reward)
from lanechange.prediction import scenario_unpredictability
from lanechange.scenario import (FOLLOWING_TARGET, PRECEDING_CURRENT, PRECEDING_ROLES, PRECEDING_TARGET,
                                 AdjacentTrack, Control, LaneGeometry, Line, State)

from tests.helpers import central_difference, random_scene

LANES = LaneGeometry(Line([0.0, 0.0], [0.0, 1.0]), Line([4.0, 0.0], [0.0, 1.0]), 4.0)
UP = math.pi / 2


def _car(role, position, speed=10.0, present=True):
    return AdjacentTrack(role, [position], [speed], [present])


def _ahead(distance, angle):
    """A point ``distance`` from the origin, ``angle`` off the +y heading"""
    return [-distance * math.sin(angle), distance * math.cos(angle)]


class TestScalarFeatures:
    def test_lateral_deviation(self):
        assert phi_d(State(2.0, 7.0, UP), LANES) == pytest.approx(-math.exp(0.5))
        assert phi_d(State(4.0, -3.0, UP), LANES) == pytest.approx(-1.0)

    def test_speed_and_turning(self):
        assert phi_v(Control(27.0, 0.0), 25.0) == pytest.approx(-4.0)
        assert phi_a(Control(27.0, -0.3)) == pytest.approx(-0.09)

    def test_preceding_ttc(self, cfg):
        preceding = [_car(PRECEDING_CURRENT, _ahead(20.0, 0.3)), AdjacentTrack.absent(PRECEDING_TARGET, 1)]
        value = phi_p(State(0.0, 0.0, UP), Control(10.0, 0.0), preceding, 0, cfg)
        assert value == pytest.approx(-math.exp(-1.3), abs=1e-12)

    def test_preceding_ttc_with_unpredictability(self, cfg):
        preceding = [_car(PRECEDING_CURRENT, _ahead(20.0, 0.3)), AdjacentTrack.absent(PRECEDING_TARGET, 1)]
        z = {PRECEDING_CURRENT: [math.sqrt(10.0)], PRECEDING_TARGET: [0.0]}
        value = phi_pz(State(0.0, 0.0, UP), Control(10.0, 0.0), preceding, z, 0, cfg)
        assert value == pytest.approx(-math.exp(-1.05), abs=1e-12)

    def test_following_ttc(self, cfg):
        follower = _car(FOLLOWING_TARGET, [2.0, -15.0], speed=12.0)
        assert phi_f(State(2.0, 0.0, UP), follower, 0, LANES, cfg) == pytest.approx(-0.25 * math.exp(-225 / 576))

    def test_following_ttc_with_unpredictability(self, cfg):
        follower = _car(FOLLOWING_TARGET, [2.0, -15.0], speed=12.0)
        z = {FOLLOWING_TARGET: [math.sqrt(8.1)]}
        value = phi_fz(State(2.0, 0.0, UP), follower, z, 0, LANES, cfg)
        assert value == pytest.approx(-0.25 * math.exp(-144 / 576))

    def test_coincident_car_is_the_largest_penalty(self, cfg):
        preceding = [_car(PRECEDING_CURRENT, [1.0, 2.0]), AdjacentTrack.absent(PRECEDING_TARGET, 1)]
        state, control = State(1.0, 2.0, UP), Control(10.0, 0.0)
        assert phi_p(state, control, preceding, 0, cfg) == pytest.approx(-1.0)
        z = {PRECEDING_CURRENT: [1.0], PRECEDING_TARGET: [0.0]}
        # c_p z^2 / (t_p^2 v^2) = 10 / 400
        assert phi_pz(state, control, preceding, z, 0, cfg) == pytest.approx(-math.exp(0.025))
        nearby = [_car(PRECEDING_CURRENT, [1.0, 2.01]), AdjacentTrack.absent(PRECEDING_TARGET, 1)]
        assert phi_p(state, control, nearby, 0, cfg) == pytest.approx(-1.0, abs=1e-3)

    def test_cars_behind_are_ignored(self, cfg):
        preceding = [_car(PRECEDING_CURRENT, [0.0, -10.0]), _car(PRECEDING_TARGET, _ahead(10.0, 1.6))]
        assert phi_p(State(0.0, 0.0, UP), Control(10.0, 0.0), preceding, 0, cfg) == 0.0

    def test_absent_cars_are_ignored(self, cfg):
        preceding = [AdjacentTrack.absent(role, 1) for role in PRECEDING_ROLES]
        assert phi_p(State(0.0, 0.0, UP), Control(10.0, 0.0), preceding, 0, cfg) == 0.0
        follower = AdjacentTrack.absent(FOLLOWING_TARGET, 1)
        assert phi_f(State(2.0, 0.0, UP), follower, 0, LANES, cfg) == 0.0

    def test_stopped_ego_uses_speed_floor(self, cfg):
        preceding = [_car(PRECEDING_CURRENT, [0.0, 0.02]), AdjacentTrack.absent(PRECEDING_TARGET, 1)]
        value = phi_p(State(0.0, 0.0, UP), Control(0.0, 0.0), preceding, 0, cfg)
        # 0.02^2 / (2^2 * 0.1^2) = 0.01
        assert value == pytest.approx(-math.exp(-0.01))

    def test_follower_on_target_centerline_costs_nothing(self, cfg):
        follower = _car(FOLLOWING_TARGET, [4.0, -5.0])
        assert phi_f(State(4.0, 0.0, UP), follower, 0, LANES, cfg) == 0.0

    @settings(deadline=None, max_examples=30)
    @given(st.floats(0.0, 5.0), st.floats(-60.0, 60.0), st.floats(-1.5, 1.5))
    def test_without_unpredictability_weighting_the_variants_agree(self, z, gap, angle):
        cfg = FeatureConfig(c_p=0.0, c_f=0.0)
        preceding = [_car(PRECEDING_CURRENT, _ahead(abs(gap) + 1.0, angle)), AdjacentTrack.absent(PRECEDING_TARGET, 1)]
        follower = _car(FOLLOWING_TARGET, [4.0, gap])
        zs = {PRECEDING_CURRENT: [z], PRECEDING_TARGET: [z], FOLLOWING_TARGET: [z]}
        state, control = State(1.0, 0.0, UP), Control(20.0, 0.0)
        assert phi_pz(state, control, preceding, zs, 0, cfg) == pytest.approx(phi_p(state, control, preceding, 0, cfg))
        assert phi_fz(state, follower, zs, 0, LANES, cfg) == pytest.approx(phi_f(state, follower, 0, LANES, cfg))

    def test_features_are_penalties(self, cfg):
        rng = np.random.default_rng(4)
        for _ in range(20):
            state = State(rng.uniform(-2, 6), rng.uniform(-5, 5), rng.uniform(-math.pi, math.pi))
            control = Control(rng.uniform(0, 30), rng.normal())
            preceding = [_car(role, rng.uniform(-20, 20, 2)) for role in PRECEDING_ROLES]
            follower = _car(FOLLOWING_TARGET, rng.uniform(-20, 20, 2))
            assert phi_d(state, LANES) < 0
            assert phi_v(control, 25.0) <= 0
            assert phi_a(control) <= 0
            assert phi_p(state, control, preceding, 0, cfg) <= 0
            assert phi_f(state, follower, 0, LANES, cfg) <= 0


class TestTrajectoryFeatures:
    def test_sums_match_scalar_loop(self, cfg):
        scene = random_scene(seed=2)
        z = scenario_unpredictability(scene, t_n=2)
        sums = feature_sums(scene.ego, scene, z, cfg, 'unpred')
        preceding = [scene.adjacent[role] for role in PRECEDING_ROLES]
        following = scene.adjacent[FOLLOWING_TARGET]
        expected = dict.fromkeys(ALL_FEATURES, 0.0)
        for k, row in enumerate(scene.ego.step_states()):
            state, control = State.from_array(row), Control(*scene.ego.controls[k])
            expected['d'] += phi_d(state, scene.lanes)
            expected['v'] += phi_v(control, scene.v_d)
            expected['a'] += phi_a(control)
            expected['p'] += phi_p(state, control, preceding, k, cfg)
            expected['f'] += phi_f(state, following, k, scene.lanes, cfg)
            expected['pz'] += phi_pz(state, control, preceding, z, k, cfg)
            expected['fz'] += phi_fz(state, following, z, k, scene.lanes, cfg)
        for name in ALL_FEATURES:
            assert sums[name] == pytest.approx(expected[name], rel=1e-9, abs=1e-12)

    def test_single_step(self, cfg):
        scene = random_scene(seed=5, K=1)
        sums = feature_sums(scene.ego, scene, None, cfg, 'baseline')
        assert sums.names == BASELINE
        control = Control(*scene.ego.controls[0])
        assert sums['v'] == pytest.approx(phi_v(control, scene.v_d))
        assert sums['d'] == pytest.approx(phi_d(scene.ego.x0, scene.lanes))

    def test_zero_unpredictability_reduces_to_baseline(self, cfg, scene):
        steps = feature_steps(scene.ego, scene, None, cfg, 'unpred')
        np.testing.assert_array_equal(steps['pz'], steps['p'])
        np.testing.assert_array_equal(steps['fz'], steps['f'])

    def test_unpredictability_raises_risk(self, cfg, scene):
        z = scenario_unpredictability(scene, t_n=2)
        steps = feature_steps(scene.ego, scene, z, cfg, 'unpred')
        assert np.all(steps['pz'] <= steps['p'] + 1e-15)

    def test_unknown_variant(self, cfg, scene):
        with pytest.raises(ConfigError):
            feature_sums(scene.ego, scene, None, cfg, 'fancy')


class TestNormalization:
    def test_min_max(self):
        constants = NormalizationConstants(('d', 'v'), [-4.0, -10.0], [-2.0, 0.0])
        np.testing.assert_allclose(normalize([-3.0, -10.0], constants), [0.5, 0.0])

    def test_degenerate_range_maps_to_zero(self):
        constants = NormalizationConstants(('a',), [0.0], [0.0])
        np.testing.assert_array_equal(normalize(np.array([[0.0], [0.0]]), constants), 0.0)

    def test_max_below_min(self):
        with pytest.raises(InvalidValueError):
            NormalizationConstants(('a',), [1.0], [0.0])

    def test_training_steps_land_in_unit_interval(self, cfg, scene):
        constants = normalization_from([scene], cfg, 'unpred')
        steps = normalize(feature_steps(scene.ego, scene, None, cfg, 'unpred'), constants)
        assert np.all(steps.values >= -1e-12)
        assert np.all(steps.values <= 1.0 + 1e-12)

    def test_reward_is_linear(self):
        features = FeatureVector(('d', 'v'), [2.0, -3.0])
        assert reward(features, ThetaWeights(('d', 'v'), [0.5, 2.0])) == pytest.approx(-5.0)
        assert reward(features, ThetaWeights(('v',), [1.0])) == pytest.approx(-3.0)


class TestWeights:
    def test_negative_weights_rejected(self):
        with pytest.raises(InvalidValueError):
            ThetaWeights(('d',), [-1.0])

    def test_restricted_fills_zeros(self):
        theta = ThetaWeights.from_mapping({'d': 1.0, 'pz': 2.0})
        assert theta.restricted(BASELINE).as_dict() == {'d': 1.0, 'v': 0.0, 'a': 0.0, 'p': 0.0, 'f': 0.0}

    def test_normalized(self):
        np.testing.assert_allclose(ThetaWeights(('d', 'v'), [1.0, 3.0]).normalized(), [0.25, 0.75])


class TestRewardFunction:
    def test_jacobian_matches_finite_differences(self, cfg, identity_norm):
        scene = random_scene(seed=7)
        z = scenario_unpredictability(scene, t_n=2)
        function = RewardFunction(scene, cfg, identity_norm, z)
        u = np.array(scene.ego.controls).reshape(-1)
        oracle = central_difference(function.sums, u)
        np.testing.assert_allclose(function.jacobian(u), oracle, atol=1e-5, rtol=1e-6)

    def test_value_and_gradient(self, cfg, identity_norm):
        scene = random_scene(seed=8)
        function = RewardFunction(scene, cfg, identity_norm)
        u = np.array(scene.ego.controls).reshape(-1)
        theta = ThetaWeights(ALL_FEATURES, [1.0, 0.5, 2.0, 0.0, 3.0, 1.0, 0.25])
        value, gradient = function.value_and_gradient(u, theta)
        assert value == pytest.approx(float(theta.values @ function.sums(u)))
        np.testing.assert_allclose(gradient, theta.values @ function.jacobian(u), atol=1e-10)

    def test_sums_are_normalized_feature_sums(self, cfg, identity_norm):
        scene = random_scene(seed=9)
        function = RewardFunction(scene, cfg, identity_norm)
        raw = feature_sums(scene.ego, scene, None, cfg, 'unpred')
        np.testing.assert_allclose(function.sums(np.array(scene.ego.controls).reshape(-1)),
                                   scene.K + raw.values, rtol=1e-10)

    def test_unknown_weight_names(self, cfg, scene):
        function = RewardFunction(scene, cfg, NormalizationConstants.identity(BASELINE))
        with pytest.raises(ConfigError):
            function.value_and_gradient(np.array(scene.ego.controls).reshape(-1),
                                        ThetaWeights.one_hot(('d', 'pz'), 'pz'))

    def test_first_non_finite_is_none_for_finite_plans(self, cfg, identity_norm, scene):
        function = RewardFunction(scene, cfg, identity_norm)
        assert function.first_non_finite(np.array(scene.ego.controls).reshape(-1)) is None


class TestModelArtifact:
    def _artifact(self):
        return ModelArtifact('baseline', ThetaWeights(BASELINE, [1.0, 0.5, 0.1, 2.0, 3.0]), FeatureConfig(c_p=5.0),
                             NormalizationConstants.identity(BASELINE), metadata={'seed': 3})

    def test_save_and_load(self, tmp_path):
        artifact = self._artifact()
        loaded = ModelArtifact.load(artifact.save(tmp_path / 'model.json'))
        assert loaded.to_dict() == artifact.to_dict()

    def test_wrong_format(self, tmp_path):
        path = tmp_path / 'model.json'
        path.write_text('{"format": "lanechange-scenario/1"}')
        with pytest.raises(ParseError):
            ModelArtifact.load(path)

    def test_missing_field(self, tmp_path):
        data = self._artifact().to_dict()
        del data['normalization']
        path = tmp_path / 'model.json'
        path.write_text(json.dumps(data))
        with pytest.raises(ParseError) as excinfo:
            ModelArtifact.load(path)
        assert excinfo.value.details['field'] == 'normalization'
