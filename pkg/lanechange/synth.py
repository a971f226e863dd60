"""
Synthetic two-lane highway scenes with scripted neighbours, synthetic
experts generated under known weights, and NGSIM-style fixtures.

The origin lane centerline is x = 0 and the target lane x = w; traffic
moves along +y. Scenes are deterministic given their seed.
"""
import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from lanechange.errors import ConfigError, InvalidValueError
from lanechange.features import NormalizationConstants, feature_steps, variant_features
from lanechange.ingest import FEET, NGSIM_COLUMNS, RawTrack, get_schema
from lanechange.scenario import (FOLLOWING_CURRENT, FOLLOWING_TARGET, PRECEDING_CURRENT, PRECEDING_TARGET, ROLES,
                                 AdjacentTrack, LaneGeometry, Line, Scenario, State, Trajectory, lateral_distance,
                                 mean_traffic_speed)
from lanechange.trajopt import optimize

logger = logging.getLogger(__name__)

BEHAVIORS = ('constant', 'zigzag', 'cut-in', 'speed-up', 'absent')


@dataclass(frozen=True)
class BehaviorSpec:
    """
    Scripted motion of one neighbour. ``gap`` is its longitudinal offset
    from the ego at window start; ``start`` and ``duration`` (s) time a
    cut-in or a speed-up.
    """
    kind: str = 'constant'
    speed: float = 25.0
    gap: float = 30.0
    amplitude: float = 0.5
    period: float = 2.0
    start: float = 2.0
    duration: float = 3.0
    acceleration: float = 1.5

    def __post_init__(self):
        if self.kind not in BEHAVIORS:
            raise ConfigError(f'Unknown behavior {self.kind!r}', kind=self.kind, known=list(BEHAVIORS))
        if self.speed < 0 or self.period <= 0 or self.duration <= 0:
            raise ConfigError('Behavior speed, period and duration must be positive', kind=self.kind)


def _default_behaviors():
    return {
        PRECEDING_CURRENT: BehaviorSpec('constant', 24.0, 35.0),
        PRECEDING_TARGET: BehaviorSpec('zigzag', 25.0, 20.0),
        FOLLOWING_CURRENT: BehaviorSpec('constant', 25.0, -30.0),
        FOLLOWING_TARGET: BehaviorSpec('constant', 26.0, -25.0),
    }


@dataclass(frozen=True)
class SceneSpec:
    w: float = 3.7
    ego_speed: float = 25.0
    K: int = 70
    dt: float = 0.1
    history: int = 5
    jitter: float = 1.0
    behaviors: dict = field(default_factory=_default_behaviors)

    def __post_init__(self):
        if not self.w > 0 or not self.dt > 0 or int(self.K) < 1:
            raise ConfigError('Scene needs positive w, dt and K', w=self.w, dt=self.dt, K=self.K)
        unknown = sorted(set(self.behaviors) - set(ROLES))
        if unknown:
            raise ConfigError(f'Unknown roles {unknown}', roles=unknown)


def load_scene_spec(path):
    """Read a TOML behavior file: a [scene] table and one [behaviors.<role>] table per car"""
    try:
        with open(path, 'rb') as handle:
            data = tomllib.load(handle)
    except FileNotFoundError:
        raise ConfigError(f'Behavior spec not found: {path}', path=str(path))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f'Behavior spec is not valid TOML: {e}', path=str(path))
    behaviors = _default_behaviors()
    for role, values in data.get('behaviors', {}).items():
        behaviors[role] = BehaviorSpec(**values)
    try:
        return SceneSpec(behaviors=behaviors, **data.get('scene', {}))
    except TypeError as e:
        raise ConfigError(f'Invalid [scene] table: {e}', path=str(path))


def _lane_x(role, w):
    return w if role in (PRECEDING_TARGET, FOLLOWING_TARGET) else 0.0


def _motion(behavior, lane_x, w, t):
    """Positions (n, 2) and speeds (n,) of a scripted car at times t"""
    x = np.full_like(t, lane_x)
    vx = np.zeros_like(t)
    y = behavior.gap + behavior.speed * t
    vy = np.full_like(t, behavior.speed)
    if behavior.kind == 'zigzag':
        phase = 2.0 * math.pi * t / behavior.period
        x = x + behavior.amplitude * np.sin(phase)
        vx = behavior.amplitude * 2.0 * math.pi / behavior.period * np.cos(phase)
    elif behavior.kind == 'cut-in':
        # cosine blend into the other lane
        other = w - lane_x
        s = np.clip((t - behavior.start) / behavior.duration, 0.0, 1.0)
        x = lane_x + (other - lane_x) * 0.5 * (1.0 - np.cos(math.pi * s))
        inside = (t > behavior.start) & (t < behavior.start + behavior.duration)
        vx = np.where(inside, (other - lane_x) * 0.5 * math.pi / behavior.duration * np.sin(math.pi * s), 0.0)
    elif behavior.kind == 'speed-up':
        tau = np.clip(t - behavior.start, 0.0, behavior.duration)
        after = np.maximum(t - behavior.start - behavior.duration, 0.0)
        y = y + behavior.acceleration * (0.5 * tau ** 2 + behavior.duration * after)
        vy = vy + behavior.acceleration * tau
    return np.column_stack([x, y]), np.hypot(vx, vy)


def _jittered(behaviors, jitter, rng):
    if jitter <= 0:
        return dict(behaviors)
    jittered = {}
    for role in ROLES:
        behavior = behaviors.get(role, BehaviorSpec('absent'))
        gap_shift, speed_shift = rng.uniform(-2.0, 2.0), rng.normal(0.0, 0.5)
        jittered[role] = replace(behavior, gap=behavior.gap + jitter * gap_shift,
                                 speed=max(0.0, behavior.speed + jitter * speed_shift))
    return jittered


def straight_ego(spec, x0=None):
    x0 = x0 or State(0.0, 0.0, math.pi / 2)
    controls = np.column_stack([np.full(spec.K, spec.ego_speed), np.zeros(spec.K)])
    return Trajectory.from_controls(x0, controls, spec.dt)


def make_scene(spec=None, seed=0, scenario_id=None):
    """Scenario with scripted neighbours and a straight placeholder ego"""
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    behaviors = _jittered(spec.behaviors, spec.jitter, rng)
    t = np.arange(-spec.history, spec.K) * spec.dt
    adjacent = {}
    for role in ROLES:
        behavior = behaviors.get(role, BehaviorSpec('absent'))
        if behavior.kind == 'absent':
            adjacent[role] = AdjacentTrack.absent(role, spec.K)
            continue
        positions, speeds = _motion(behavior, _lane_x(role, spec.w), spec.w, t)
        adjacent[role] = AdjacentTrack(role, positions[spec.history:], speeds[spec.history:],
                                       np.ones(spec.K, dtype=bool), positions[:spec.history])
    lanes = LaneGeometry(Line([0.0, 0.0], [0.0, 1.0]), Line([spec.w, 0.0], [0.0, 1.0]), spec.w)
    metadata = {'seed': seed, 'expert': 'placeholder',
                'behaviors': {role: behaviors.get(role, BehaviorSpec('absent')).kind for role in ROLES}}
    return Scenario(scenario_id or f'synth_{seed:04d}', straight_ego(spec), adjacent, lanes,
                    mean_traffic_speed(adjacent), 'synthetic', metadata)


def make_expert(scenario, theta_star, cfg, norm, noise=0.0, seed=0, settings=None, z=None):
    """Replace the ego with the trajectory that is optimal under ``theta_star``"""
    result = optimize(scenario, theta_star, cfg, norm, settings, z, seed)
    controls = np.array(result.trajectory.controls)
    if noise > 0:
        rng = np.random.default_rng(seed)
        controls = controls + noise * rng.standard_normal(controls.shape)
        controls[:, 0] = np.maximum(controls[:, 0], 0.0)
    expert = Trajectory.from_controls(scenario.ego.x0, controls, scenario.dt)
    return scenario.with_ego(expert, expert='synthetic', theta_star=theta_star.as_dict(), noise=noise,
                             reward=result.reward, converged=result.report.converged)


def reference_normalization(scenarios, cfg, variant='unpred', z_series=None, samples=8, seed=0):
    """
    Per-step min and max over seeded random rollouts around each scene's
    placeholder ego, usable before any expert exists.
    """
    names = variant_features(variant)
    rng = np.random.default_rng(seed)
    stacked = []
    for index, scenario in enumerate(scenarios):
        z = z_series[index] if z_series is not None else None
        base = scenario.ego.controls
        for _ in range(samples):
            controls = base + np.column_stack([rng.normal(0.0, 2.0, scenario.K), rng.normal(0.0, 0.05, scenario.K)])
            controls[:, 0] = np.maximum(controls[:, 0], 0.0)
            trajectory = Trajectory.from_controls(scenario.ego.x0, controls, scenario.dt)
            stacked.append(feature_steps(trajectory, scenario, z, cfg, variant).values)
    if not stacked:
        raise InvalidValueError('Reference normalization needs at least one scene')
    stacked = np.vstack(stacked)
    return NormalizationConstants(names, stacked.min(axis=0), stacked.max(axis=0))


def make_recording(spec=None, seed=0, lane_ids=(1, 2), lead_frames=40, tail_frames=40, change_duration=4.0):
    """
    Scripted recording: the ego changes from lane ``lane_ids[0]`` to
    ``lane_ids[1]`` and four neighbours drive in their lanes. Returns
    RawTracks in meters; vehicle 1 is the ego, 2..5 follow ROLES order.
    """
    spec = spec or SceneSpec(jitter=0.0, behaviors={role: BehaviorSpec('constant', 25.0, gap) for role, gap in
                                                     zip(ROLES, (30.0, 15.0, -30.0, -20.0))})
    lead = int(round(2.0 / spec.dt))
    window_start = lead_frames
    n_frames = lead_frames + spec.K + tail_frames
    t = np.arange(n_frames) * spec.dt
    # lateral move centred on the lane-label change at window start + 2 s
    centre = (window_start + lead) * spec.dt
    s = np.clip((t - centre) / change_duration + 0.5, 0.0, 1.0)
    ego_x = spec.w * (s ** 3 * (10.0 - 15.0 * s + 6.0 * s ** 2))
    ego_y = spec.ego_speed * t
    ego_positions = np.column_stack([ego_x, ego_y])

    def lane_of(x):
        return np.where(x > spec.w / 2.0, lane_ids[1], lane_ids[0])

    frames = np.arange(n_frames) + 1
    tracks = [RawTrack(1, frames, ego_positions, lane_of(ego_x))]
    rng = np.random.default_rng(seed)
    behaviors = _jittered(spec.behaviors, spec.jitter, rng)
    start_time = window_start * spec.dt
    for vehicle_id, role in enumerate(ROLES, start=2):
        behavior = behaviors.get(role, BehaviorSpec('absent'))
        if behavior.kind == 'absent':
            continue
        positions, _ = _motion(behavior, _lane_x(role, spec.w), spec.w, t - start_time)
        positions[:, 1] += ego_y[window_start]
        tracks.append(RawTrack(vehicle_id, frames, positions, lane_of(positions[:, 0])))
    return tracks


def scene_tracks(scenario, lane_ids=(1, 2)):
    """RawTracks of a scenario's ego and present neighbours, frame = step"""
    ego = np.vstack([scenario.ego.x0.as_array()[None, :2], scenario.ego.positions()])
    current, target = scenario.lanes.current_line, scenario.lanes.target_line

    def lanes_of(points):
        return np.array([lane_ids[1] if lateral_distance(p, target) < lateral_distance(p, current) else lane_ids[0]
                         for p in points])

    tracks = [RawTrack(1, np.arange(ego.shape[0]), ego, lanes_of(ego))]
    for vehicle_id, role in enumerate(ROLES, start=2):
        track = scenario.adjacent[role]
        frames = np.flatnonzero(track.present)
        if frames.size:
            points = track.positions[frames]
            tracks.append(RawTrack(vehicle_id, frames, points, lanes_of(points)))
    return tracks


def export_fixture(scene, path, fixture_format='ngsim'):
    """Write tracks (or a scenario's tracks) as a table ingest.parse reads back"""
    tracks = scene_tracks(scene) if isinstance(scene, Scenario) else list(scene)
    schema = get_schema(fixture_format)
    factor = 1.0 / FEET if schema.units == 'feet' else 1.0
    rows = []
    for track in sorted(tracks, key=lambda item: item.vehicle_id):
        positions = track.positions * factor
        speed = np.zeros(len(track))
        if len(track) > 1:
            speed = np.hypot(*np.gradient(positions, axis=0).T) * 10.0
        for i, frame in enumerate(track.frames):
            rows.append({
                schema.vehicle_id: track.vehicle_id,
                schema.frame: int(frame),
                schema.x: positions[i, 0],
                schema.y: positions[i, 1],
                schema.lane_id: int(track.lanes[i]),
                'Total_Frames': len(track),
                'Global_Time': int(frame) * 100,
                'Global_X': positions[i, 0],
                'Global_Y': positions[i, 1],
                'v_length': 15.0,
                'v_Width': 6.0,
                'v_Class': 2,
                'v_Vel': speed[i],
                'v_Acc': 0.0,
                'Preceding': 0,
                'Following': 0,
                'Space_Headway': 0.0,
                'Time_Headway': 0.0,
            })
    table = pd.DataFrame(rows, columns=list(NGSIM_COLUMNS) if not rows else None)
    table = table.reindex(columns=list(schema.columns))
    table.to_csv(path, index=False, float_format='%.17g')
    logger.info('Wrote %d rows for %d vehicles to %s', len(table), len(tracks), path)
    return path
