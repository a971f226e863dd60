import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lanechange.errors import InvalidGeometryError, InvalidValueError, ParseError
from lanechange.scenario import (ROLES, AdjacentTrack, Dataset, LaneGeometry, Line, State, Trajectory,
                                 lateral_distance, load_scenario, load_scenarios, save_scenario, scenario_to_dict,
                                 wrap_angle)

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)
angles = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


class TestLateralDistance:
    def test_point_on_line(self):
        assert lateral_distance((0.0, 5.0), Line([0.0, 0.0], [0.0, 1.0])) == 0.0

    def test_unit_offset(self):
        assert lateral_distance((1.0, 0.0), Line([0.0, 0.0], [0.0, 1.0])) == pytest.approx(1.0)

    def test_slanted_line(self):
        line = Line([0.0, 0.0], [0.6, 0.8])
        assert lateral_distance((3.0, 4.0), line) == pytest.approx(0.0, abs=1e-12)
        normal = np.array([0.8, -0.6])
        assert lateral_distance(np.array([3.0, 4.0]) + 2.0 * normal, line) == pytest.approx(2.0)

    def test_degenerate_line(self):
        line = SimpleNamespace(point=np.zeros(2), direction=np.zeros(2))
        with pytest.raises(InvalidGeometryError):
            lateral_distance((1.0, 1.0), line)

    def test_line_rejects_zero_direction(self):
        with pytest.raises(InvalidGeometryError):
            Line([0.0, 0.0], [0.0, 0.0])

    @given(finite, finite, finite, finite, finite, finite, st.floats(min_value=-math.pi, max_value=math.pi))
    def test_translation_invariance(self, px, py, ax, ay, tx, ty, heading):
        line = Line([ax, ay], [math.cos(heading), math.sin(heading)])
        shifted = line.translated([tx, ty])
        expected = lateral_distance((px, py), line)
        assert lateral_distance((px + tx, py + ty), shifted) == pytest.approx(expected, abs=1e-9)


class TestWrapAngle:
    def test_examples(self):
        assert wrap_angle(0.0) == 0.0
        assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == math.pi

    def test_non_finite(self):
        with pytest.raises(InvalidValueError):
            wrap_angle(float('nan'))

    @given(angles)
    def test_range_and_idempotence(self, a):
        wrapped = wrap_angle(a)
        assert -math.pi < wrapped <= math.pi
        assert wrap_angle(wrapped) == wrapped
        assert math.cos(wrapped) == pytest.approx(math.cos(a), abs=1e-6)


class TestTypes:
    def test_state_rejects_non_finite(self):
        with pytest.raises(InvalidValueError):
            State(0.0, float('inf'), 0.0)

    def test_trajectory_rejects_negative_speed(self):
        with pytest.raises(InvalidValueError):
            Trajectory.from_controls(State(0.0, 0.0, 0.0), [[1.0, 0.0], [-1.0, 0.0]], 0.1)

    def test_trajectory_arrays_are_read_only(self, straight):
        with pytest.raises(ValueError):
            straight.controls[0, 0] = 3.0

    def test_step_states_pair_with_controls(self, straight):
        step_states = straight.step_states()
        assert step_states.shape == (straight.K, 3)
        np.testing.assert_array_equal(step_states[0], straight.x0.as_array())
        np.testing.assert_array_equal(step_states[1:], straight.states[:-1])

    def test_absent_samples_are_zeroed(self):
        track = AdjacentTrack(ROLES[0], [[1.0, 2.0], [3.0, 4.0]], [5.0, 6.0], [True, False])
        np.testing.assert_array_equal(track.positions[1], [0.0, 0.0])
        assert track.speeds[1] == 0.0

    def test_lane_geometry_needs_positive_spacing(self):
        with pytest.raises(InvalidGeometryError):
            LaneGeometry(Line([0, 0], [0, 1]), Line([3.7, 0], [0, 1]), 0.0)

    def test_scenario_needs_all_roles(self, scene):
        adjacent = dict(scene.adjacent)
        del adjacent[ROLES[0]]
        with pytest.raises(InvalidValueError):
            type(scene)(scene.id, scene.ego, adjacent, scene.lanes, scene.v_d)

    def test_with_ego_keeps_surroundings(self, scene, straight):
        replaced = scene.with_ego(straight, generated_by='test')
        assert replaced.ego is straight
        assert replaced.adjacent == scene.adjacent
        assert replaced.metadata['generated_by'] == 'test'

    def test_dataset_ids_unique(self, scene):
        with pytest.raises(InvalidValueError):
            Dataset((scene, scene), 'train')


class TestScenarioFiles:
    def test_save_and_load(self, scene, tmp_path):
        path = save_scenario(scene, tmp_path / 'scene.json')
        loaded = load_scenario(path)
        assert scenario_to_dict(loaded) == scenario_to_dict(scene)

    def test_tampered_states_rejected(self, scene, tmp_path):
        data = scenario_to_dict(scene)
        data['ego']['states'][3][0] += 1.0
        path = tmp_path / 'bad.json'
        path.write_text(json.dumps(data))
        with pytest.raises(InvalidValueError):
            load_scenario(path)

    def test_wrong_format(self, tmp_path):
        path = tmp_path / 'other.json'
        path.write_text(json.dumps({'format': 'something-else'}))
        with pytest.raises(ParseError):
            load_scenario(path)

    def test_load_scenarios_skips_reports(self, scene, tmp_path):
        save_scenario(scene, tmp_path / f'{scene.id}.json')
        (tmp_path / f'{scene.id}.report.json').write_text('{}')
        assert [item.id for item in load_scenarios(tmp_path)] == [scene.id]
