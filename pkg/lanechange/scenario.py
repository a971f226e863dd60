"""
Shared domain types: states, controls, trajectories, lanes, adjacent
vehicles, scenarios and datasets, plus the scenario file format.

All positions live in the scenario-local frame: x is lateral, y is
longitudinal and the ego starts at the origin. Arrays held by the types
are made read-only so instances can be shared between workers.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType

import numpy as np

from lanechange.errors import InvalidGeometryError, InvalidValueError, ParseError

logger = logging.getLogger(__name__)

FORMAT = 'lanechange-scenario/1'

PRECEDING_CURRENT = 'preceding-current'
PRECEDING_TARGET = 'preceding-target'
FOLLOWING_CURRENT = 'following-current'
FOLLOWING_TARGET = 'following-target'
ROLES = (PRECEDING_CURRENT, PRECEDING_TARGET, FOLLOWING_CURRENT, FOLLOWING_TARGET)
PRECEDING_ROLES = (PRECEDING_CURRENT, PRECEDING_TARGET)

SPLITS = ('train', 'validation', 'test')


def _frozen(values, dtype=float):
    array = np.array(values, dtype=dtype)
    array.setflags(write=False)
    return array


def _check_finite(name, values):
    if not np.all(np.isfinite(values)):
        raise InvalidValueError(f'{name} must be finite', field=name)


def wrap_angle(a):
    """Wrap an angle to (-pi, pi]"""
    if not math.isfinite(a):
        raise InvalidValueError('Angle must be finite', value=a)
    wrapped = math.remainder(a, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped = math.pi
    return wrapped


@dataclass(frozen=True)
class State:
    """Ego pose: lateral x (m), longitudinal y (m), heading psi (rad)"""
    x: float
    y: float
    psi: float

    def __post_init__(self):
        _check_finite('state', (self.x, self.y, self.psi))

    def as_array(self):
        return np.array([self.x, self.y, self.psi], dtype=float)

    @classmethod
    def from_array(cls, values):
        return cls(float(values[0]), float(values[1]), float(values[2]))


@dataclass(frozen=True)
class Control:
    """Speed input v (m/s) and heading-rate input omega (rad/s)"""
    v: float
    omega: float

    def __post_init__(self):
        _check_finite('control', (self.v, self.omega))
        if self.v < 0:
            raise InvalidValueError('Speed input must be non-negative', v=self.v)

    def as_array(self):
        return np.array([self.v, self.omega], dtype=float)


@dataclass(frozen=True)
class Trajectory:
    """
    Initial state plus K controls and the K states they produce.

    ``controls`` has columns (v, omega) and ``states`` columns (x, y, psi);
    ``states[k]`` is the state reached after applying ``controls[k]``.
    """
    x0: State
    controls: np.ndarray
    states: np.ndarray
    dt: float

    def __post_init__(self):
        controls = _frozen(self.controls)
        states = _frozen(self.states)
        if controls.ndim != 2 or controls.shape[1] != 2 or controls.shape[0] < 1:
            raise InvalidValueError('Controls must have shape (K, 2) with K >= 1', shape=controls.shape)
        if states.shape != (controls.shape[0], 3):
            raise InvalidValueError('States must have shape (K, 3)', shape=states.shape)
        if not self.dt > 0:
            raise InvalidValueError('Time step must be positive', dt=self.dt)
        _check_finite('controls', controls)
        _check_finite('states', states)
        if np.any(controls[:, 0] < 0):
            raise InvalidValueError('Speed inputs must be non-negative', step=int(np.argmin(controls[:, 0])))
        object.__setattr__(self, 'controls', controls)
        object.__setattr__(self, 'states', states)
        object.__setattr__(self, 'dt', float(self.dt))

    @property
    def K(self):
        return self.controls.shape[0]

    def control(self, k):
        return Control(float(self.controls[k, 0]), float(self.controls[k, 1]))

    def state(self, k):
        return State.from_array(self.states[k])

    def step_states(self):
        """States x_0 .. x_{K-1}, each paired with controls[k]"""
        return np.vstack([self.x0.as_array()[None, :], self.states[:-1]])

    def positions(self):
        """Positions of x_1 .. x_K"""
        return self.states[:, :2]

    @classmethod
    def from_controls(cls, x0, controls, dt):
        """Build a trajectory by rolling the controls out from x0"""
        from lanechange.dynamics import rollout_array
        controls = np.asarray(controls, dtype=float)
        return cls(x0, controls, rollout_array(x0.as_array(), controls, dt), dt)


@dataclass(frozen=True)
class Line:
    """Infinite 2D line through ``point`` with unit ``direction``"""
    point: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        point = _frozen(self.point)
        direction = np.array(self.direction, dtype=float)
        if point.shape != (2,) or direction.shape != (2,):
            raise InvalidGeometryError('Line point and direction must be 2D')
        _check_finite('line', np.concatenate([point, direction]))
        norm = float(np.hypot(direction[0], direction[1]))
        if norm < 1e-12:
            raise InvalidGeometryError('Line direction must be non-zero', direction=direction)
        object.__setattr__(self, 'point', point)
        object.__setattr__(self, 'direction', _frozen(direction / norm))

    def translated(self, offset):
        return Line(self.point + np.asarray(offset, dtype=float), self.direction)

    def to_dict(self):
        return {'point': self.point.tolist(), 'direction': self.direction.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(data['point'], data['direction'])


def lateral_distance(p, line):
    """Perpendicular distance (m) from point ``p`` to ``line``"""
    point = np.asarray(line.point, dtype=float)
    direction = np.asarray(line.direction, dtype=float)
    norm = float(np.hypot(direction[0], direction[1]))
    if norm < 1e-12:
        raise InvalidGeometryError('Line direction must be non-zero', direction=direction)
    offset = np.asarray(p, dtype=float) - point
    return abs(direction[0] * offset[1] - direction[1] * offset[0]) / norm


@dataclass(frozen=True)
class LaneGeometry:
    """Fitted centerlines of the origin and target lanes and their spacing w"""
    current_line: Line
    target_line: Line
    w: float

    def __post_init__(self):
        if not (math.isfinite(self.w) and self.w > 0):
            raise InvalidGeometryError('Lane spacing must be positive', w=self.w)
        object.__setattr__(self, 'w', float(self.w))

    def translated(self, offset):
        return LaneGeometry(self.current_line.translated(offset), self.target_line.translated(offset), self.w)

    def to_dict(self):
        return {'current_line': self.current_line.to_dict(),
                'target_line': self.target_line.to_dict(),
                'w': self.w}

    @classmethod
    def from_dict(cls, data):
        return cls(Line.from_dict(data['current_line']), Line.from_dict(data['target_line']), data['w'])


@dataclass(frozen=True)
class AdjacentTrack:
    """
    Path of one neighbouring vehicle over the window.

    ``history`` holds positions observed just before the window so a
    predictor can be issued at step 0; it may be empty.
    """
    role: str
    positions: np.ndarray
    speeds: np.ndarray
    present: np.ndarray
    history: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        if self.role not in ROLES:
            raise InvalidValueError(f'Unknown adjacent role: {self.role}', role=self.role)
        positions = np.array(self.positions, dtype=float)
        speeds = np.array(self.speeds, dtype=float)
        present = _frozen(self.present, dtype=bool)
        history = np.array(self.history, dtype=float).reshape(-1, 2)
        K = present.shape[0]
        if positions.shape != (K, 2) or speeds.shape != (K,):
            raise InvalidValueError('Track arrays must share length K', role=self.role)
        # Absent samples carry no information; keep them at zero
        positions[~present] = 0.0
        speeds[~present] = 0.0
        _check_finite(f'{self.role} positions', positions)
        _check_finite(f'{self.role} speeds', speeds)
        _check_finite(f'{self.role} history', history)
        if np.any(speeds < 0):
            raise InvalidValueError('Speeds must be non-negative', role=self.role)
        object.__setattr__(self, 'positions', _frozen(positions))
        object.__setattr__(self, 'speeds', _frozen(speeds))
        object.__setattr__(self, 'present', present)
        object.__setattr__(self, 'history', _frozen(history))

    @property
    def K(self):
        return self.present.shape[0]

    @classmethod
    def absent(cls, role, K):
        return cls(role, np.zeros((K, 2)), np.zeros(K), np.zeros(K, dtype=bool))

    def translated(self, offset):
        offset = np.asarray(offset, dtype=float)
        positions = np.where(self.present[:, None], self.positions + offset, 0.0)
        return AdjacentTrack(self.role, positions, self.speeds, self.present, self.history + offset)

    def to_dict(self):
        return {'positions': self.positions.tolist(),
                'speeds': self.speeds.tolist(),
                'present': self.present.tolist(),
                'history': self.history.tolist()}

    @classmethod
    def from_dict(cls, role, data):
        return cls(role, data['positions'], data['speeds'], data['present'], data.get('history', []))


def mean_traffic_speed(adjacent):
    """Mean speed of the present adjacent cars over the window (v_d)"""
    speeds = [track.speeds[track.present] for track in adjacent.values()]
    speeds = np.concatenate(speeds) if speeds else np.zeros(0)
    return float(speeds.mean()) if speeds.size else 0.0


@dataclass(frozen=True)
class Scenario:
    """One lane-change instance"""
    id: str
    ego: Trajectory
    adjacent: dict
    lanes: LaneGeometry
    v_d: float
    source: str = ''
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.adjacent) != set(ROLES):
            raise InvalidValueError('Scenario needs exactly the four adjacent roles', id=self.id,
                                    roles=sorted(self.adjacent))
        for role, track in self.adjacent.items():
            if track.role != role or track.K != self.ego.K:
                raise InvalidValueError('Adjacent track does not match ego horizon', id=self.id, role=role)
        if not (math.isfinite(self.v_d) and self.v_d >= 0):
            raise InvalidValueError('Mean traffic speed must be non-negative', id=self.id, v_d=self.v_d)
        object.__setattr__(self, 'adjacent', MappingProxyType({role: self.adjacent[role] for role in ROLES}))
        object.__setattr__(self, 'metadata', MappingProxyType(dict(self.metadata)))
        object.__setattr__(self, 'v_d', float(self.v_d))

    @property
    def K(self):
        return self.ego.K

    @property
    def dt(self):
        return self.ego.dt

    def with_ego(self, ego, **metadata):
        """Same surroundings, another ego trajectory"""
        merged = dict(self.metadata)
        merged.update(metadata)
        return Scenario(self.id, ego, dict(self.adjacent), self.lanes, self.v_d, self.source, merged)


@dataclass(frozen=True)
class Dataset:
    """Scenarios of one split from one source"""
    scenarios: tuple
    split: str
    source: str = ''

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidValueError(f'Unknown split: {self.split}', split=self.split)
        ids = [scenario.id for scenario in self.scenarios]
        if len(ids) != len(set(ids)):
            raise InvalidValueError('Scenario ids must be unique within a dataset', split=self.split)
        object.__setattr__(self, 'scenarios', tuple(self.scenarios))

    def __len__(self):
        return len(self.scenarios)

    def __iter__(self):
        return iter(self.scenarios)


def scenario_to_dict(scenario):
    ego = scenario.ego
    return {
        'format': FORMAT,
        'id': scenario.id,
        'source': scenario.source,
        'dt': ego.dt,
        'K': ego.K,
        'v_d': scenario.v_d,
        'ego': {
            'x0': ego.x0.as_array().tolist(),
            'controls': ego.controls.tolist(),
            'states': ego.states.tolist(),
        },
        'adjacent': {role: scenario.adjacent[role].to_dict() for role in ROLES},
        'lanes': scenario.lanes.to_dict(),
        'metadata': dict(scenario.metadata),
    }


def scenario_from_dict(data, check=True):
    """Build a Scenario from its file representation, verifying the ego rollout"""
    if data.get('format') != FORMAT:
        raise ParseError(f'Not a scenario file (format {data.get("format")!r})', field='format')
    try:
        ego = Trajectory(State.from_array(data['ego']['x0']), data['ego']['controls'],
                         data['ego']['states'], data['dt'])
        if ego.K != data['K']:
            raise ParseError('Declared K does not match ego controls', field='K')
        adjacent = {role: AdjacentTrack.from_dict(role, data['adjacent'][role]) for role in ROLES}
        scenario = Scenario(data['id'], ego, adjacent, LaneGeometry.from_dict(data['lanes']),
                            data['v_d'], data.get('source', ''), data.get('metadata', {}))
    except KeyError as e:
        raise ParseError(f'Missing scenario field {e.args[0]!r}', field=e.args[0])
    if check:
        from lanechange.dynamics import check_trajectory
        check_trajectory(scenario.ego)
    return scenario


def save_scenario(scenario, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scenario_to_dict(scenario), indent=1) + '\n')
    return path


def load_scenario(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f'Invalid scenario file {path}: {e}', path=str(path), row=e.lineno)
    return scenario_from_dict(data)


def load_scenarios(directory):
    """Load every scenario file in ``directory``, ordered by scenario id"""
    paths = sorted(Path(directory).glob('*.json'))
    scenarios = []
    for path in paths:
        # reports and model artifacts may sit beside the scenarios they describe
        if path.name.endswith(('.report.json', '.model.json')):
            continue
        scenarios.append(load_scenario(path))
    logger.info('Loaded %d scenarios from %s', len(scenarios), directory)
    return sorted(scenarios, key=lambda scenario: scenario.id)
