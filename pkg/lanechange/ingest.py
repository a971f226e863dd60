"""
Trajectory-table ingest and lane-change extraction.

Tables are comma separated with one row per (vehicle, frame). Tracks
are smoothed with a symmetric exponential filter, differentiated, and
every change of a vehicle's lane label with enough coverage becomes a
Scenario: a 7 s window starting 2 s before the change, the four
neighbours identified at the window start, fitted lane centerlines and
positions relative to the ego's starting point.
"""
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from lanechange.errors import InsufficientDataError, InvalidValueError, LaneChangeError, ParseError, TooShortError
from lanechange.scenario import (FOLLOWING_CURRENT, FOLLOWING_TARGET, PRECEDING_CURRENT, PRECEDING_TARGET, SPLITS,
                                 AdjacentTrack, Dataset, LaneGeometry, Line, Scenario, State, Trajectory,
                                 lateral_distance, mean_traffic_speed, wrap_angle)

logger = logging.getLogger(__name__)

FEET = 0.3048
LEAD_IN = 2.0
FOLLOW_THROUGH = 5.0
MIN_LANE_POINTS = 10
REPLAY_TOLERANCE = 0.05

# Column order of the public NGSIM trajectory tables
NGSIM_COLUMNS = ('Vehicle_ID', 'Frame_ID', 'Total_Frames', 'Global_Time', 'Local_X', 'Local_Y', 'Global_X',
                 'Global_Y', 'v_length', 'v_Width', 'v_Class', 'v_Vel', 'v_Acc', 'Lane_ID', 'Preceding',
                 'Following', 'Space_Headway', 'Time_Headway')


@dataclass(frozen=True)
class TableSchema:
    """Column mapping of a trajectory table"""
    vehicle_id: str
    frame: str
    x: str
    y: str
    lane_id: str
    units: str = 'meters'
    columns: tuple = ()

    @property
    def required(self):
        return (self.vehicle_id, self.frame, self.x, self.y, self.lane_id)

    def factor(self, units=None):
        units = units or self.units
        if units not in ('meters', 'feet'):
            raise InvalidValueError(f'Unknown units {units!r}', units=units)
        return FEET if units == 'feet' else 1.0


SCHEMAS = {
    'generic': TableSchema('vehicle_id', 'frame', 'x', 'y', 'lane_id', 'meters',
                           ('vehicle_id', 'frame', 'x', 'y', 'lane_id')),
    'ngsim': TableSchema('Vehicle_ID', 'Frame_ID', 'Local_X', 'Local_Y', 'Lane_ID', 'feet', NGSIM_COLUMNS),
}


def get_schema(schema):
    if isinstance(schema, TableSchema):
        return schema
    try:
        return SCHEMAS[schema]
    except KeyError:
        raise InvalidValueError(f'Unknown schema {schema!r}', schema=schema, known=sorted(SCHEMAS))


@dataclass(frozen=True)
class RawTrack:
    """One vehicle's recorded path, in meters, one sample per frame"""
    vehicle_id: int
    frames: np.ndarray
    positions: np.ndarray
    lanes: np.ndarray

    def __post_init__(self):
        frames = np.array(self.frames, dtype=int)
        positions = np.array(self.positions, dtype=float).reshape(-1, 2)
        lanes = np.array(self.lanes, dtype=int)
        if not (frames.shape[0] == positions.shape[0] == lanes.shape[0]):
            raise InvalidValueError('Track arrays must share length', vehicle_id=self.vehicle_id)
        if np.any(np.diff(frames) <= 0):
            raise InvalidValueError('Track frames must be strictly increasing', vehicle_id=self.vehicle_id)
        if not np.all(np.isfinite(positions)):
            raise InvalidValueError('Track positions must be finite', vehicle_id=self.vehicle_id)
        for name, values in (('frames', frames), ('positions', positions), ('lanes', lanes)):
            values.setflags(write=False)
            object.__setattr__(self, name, values)

    def __len__(self):
        return self.frames.shape[0]

    def index_of(self, frame):
        """Sample index of ``frame`` or -1"""
        index = int(np.searchsorted(self.frames, frame))
        if index < len(self) and self.frames[index] == frame:
            return index
        return -1

    def covers(self, first, last):
        """Every frame first .. last is recorded"""
        start, stop = self.index_of(first), self.index_of(last)
        return start >= 0 and stop >= 0 and stop - start == last - first


@dataclass(frozen=True)
class Kinematics:
    psi: np.ndarray
    v: np.ndarray
    omega: np.ndarray


def parse(path, schema='ngsim', units=None):
    """Read a trajectory table into frame-sorted tracks, one per vehicle"""
    schema = get_schema(schema)
    factor = schema.factor(units)
    try:
        table = pd.read_csv(path, skipinitialspace=True)
    except FileNotFoundError:
        raise ParseError(f'Input file not found: {path}', path=str(path))
    except pd.errors.EmptyDataError:
        return []

    missing = [column for column in schema.required if column not in table.columns]
    if missing:
        raise ParseError(f'Input is missing column {missing[0]!r}', path=str(path), field=missing[0])
    if table.empty:
        return []

    for column in schema.required:
        values = pd.to_numeric(table[column], errors='coerce')
        bad = values.isna() | ~np.isfinite(values.fillna(0.0))
        if bad.any():
            # header is line 1
            raise ParseError(f'Non-numeric value in column {column!r}', path=str(path),
                             row=int(bad.idxmax()) + 2, field=column)
        table[column] = values

    tracks = []
    for vehicle_id, rows in table.groupby(schema.vehicle_id, sort=True):
        frames = rows[schema.frame].to_numpy()
        decreasing = np.flatnonzero(np.diff(frames) <= 0)
        if decreasing.size:
            raise ParseError(f'Frames of vehicle {int(vehicle_id)} are not increasing', path=str(path),
                             row=int(rows.index[decreasing[0] + 1]) + 2, field=schema.frame)
        positions = rows[[schema.x, schema.y]].to_numpy(dtype=float) * factor
        tracks.append(RawTrack(int(vehicle_id), frames.astype(int), positions, rows[schema.lane_id].to_numpy()))
    logger.info('Parsed %d tracks from %s', len(tracks), path)
    return tracks


def smooth(track, window=0.5, dt=0.1):
    """
    Symmetric exponential moving average over +-window seconds, decay
    constant window / 3. Weights are renormalized where the kernel runs
    past either end of the track.
    """
    positions = track.positions if isinstance(track, RawTrack) else np.asarray(track, dtype=float)
    if window <= 0:
        return np.array(positions, dtype=float)
    half = int(round(window / dt))
    offsets = np.arange(-half, half + 1) * dt
    weights = np.exp(-np.abs(offsets) / (window / 3.0))
    n = positions.shape[0]
    smoothed = np.empty((n, positions.shape[1]))
    for i in range(n):
        lo, hi = max(0, i - half), min(n, i + half + 1)
        kernel = weights[lo - i + half:hi - i + half]
        smoothed[i] = kernel @ positions[lo:hi] / kernel.sum()
    return smoothed


def _headings(velocity, initial_heading):
    speed = np.hypot(velocity[:, 0], velocity[:, 1])
    psi = np.empty(speed.shape[0])
    last = initial_heading
    for i, (vx, vy) in enumerate(velocity):
        # stationary samples keep the last defined heading
        if speed[i] > 1e-9:
            last = math.atan2(vy, vx)
        psi[i] = last
    return speed, psi


def differentiate(track, dt=0.1, scheme='central', initial_heading=math.pi / 2):
    """
    Heading, speed and turn rate from positions by finite differences.

    ``central`` uses central differences with one-sided ends; ``forward``
    uses (p[k+1] - p[k]) / dt, repeating the last value, which makes
    Euler replay of (v, omega) reproduce the positions exactly.
    """
    positions = track.positions if isinstance(track, RawTrack) else np.asarray(track, dtype=float)
    if positions.shape[0] < 3:
        raise TooShortError('Track needs at least three samples to differentiate', samples=positions.shape[0])
    if scheme == 'central':
        velocity = np.gradient(positions, dt, axis=0)
    elif scheme == 'forward':
        velocity = np.diff(positions, axis=0) / dt
        velocity = np.vstack([velocity, velocity[-1:]])
    else:
        raise InvalidValueError(f'Unknown difference scheme {scheme!r}', scheme=scheme)
    speed, psi = _headings(velocity, initial_heading)
    unwrapped = np.unwrap(psi)
    if scheme == 'central':
        omega = np.gradient(unwrapped, dt)
    else:
        omega = np.append(np.diff(unwrapped) / dt, 0.0)
    return Kinematics(psi, speed, omega)


def fit_line(points):
    """Total-least-squares line through points, oriented towards +y"""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    direction = vt[0]
    if direction[1] < 0 or (direction[1] == 0 and direction[0] < 0):
        direction = -direction
    return Line(centroid, direction)


def _line_at(line, y):
    """Point of ``line`` at longitudinal coordinate y"""
    if abs(line.direction[1]) < 1e-12:
        return line.point
    t = (y - line.point[1]) / line.direction[1]
    return line.point + t * line.direction


def fit_lanes(tracks, lane_ids, vicinity=100.0, center_y=None, frames=None, extent=None, positions=None):
    """
    Fit the current and target lane centerlines.

    ``lane_ids`` is (current, target). Points are the positions of every
    sample carrying that lane id, limited to |y - center_y| <= vicinity
    and to ``frames`` (first, last) when given. ``positions`` maps
    vehicle id to positions replacing the raw ones (smoothed tracks).
    w is the mean distance between the lines at the ends of ``extent``
    (y_min, y_max).
    """
    lines = []
    all_y = []
    for lane_id in lane_ids:
        points = []
        for track in tracks:
            xy = positions.get(track.vehicle_id, track.positions) if positions else track.positions
            mask = track.lanes == lane_id
            if frames is not None:
                mask &= (track.frames >= frames[0]) & (track.frames <= frames[1])
            if center_y is not None:
                mask &= np.abs(xy[:, 1] - center_y) <= vicinity
            points.append(xy[mask])
        points = np.vstack(points) if points else np.zeros((0, 2))
        if points.shape[0] < MIN_LANE_POINTS:
            raise InsufficientDataError(f'Lane {lane_id} has {points.shape[0]} points, needs {MIN_LANE_POINTS}',
                                        lane=int(lane_id), points=points.shape[0])
        lines.append(fit_line(points))
        all_y.append(points[:, 1])
    current, target = lines
    if extent is None:
        y = np.concatenate(all_y)
        extent = (float(y.min()), float(y.max()))
    w = float(np.mean([lateral_distance(_line_at(current, y), target) for y in extent]))
    return LaneGeometry(current, target, w)


@dataclass
class _Prepared:
    track: RawTrack
    positions: np.ndarray
    speeds: np.ndarray
    forward: Kinematics


def _prepare(track, dt, window):
    positions = smooth(track, window, dt)
    if len(track) < 3:
        return _Prepared(track, positions, np.zeros(len(track)), None)
    central = differentiate(positions, dt, 'central')
    return _Prepared(track, positions, central.v, differentiate(positions, dt, 'forward'))


def _neighbours(prepared, ego, frame, origin_lane, target_lane):
    """Vehicle ids per role at ``frame`` by longitudinal order around the ego"""
    ego_y = ego.positions[ego.track.index_of(frame), 1]
    best = {}
    for other in prepared.values():
        if other.track.vehicle_id == ego.track.vehicle_id:
            continue
        index = other.track.index_of(frame)
        if index < 0:
            continue
        lane = other.track.lanes[index]
        if lane not in (origin_lane, target_lane):
            continue
        gap = other.positions[index, 1] - ego_y
        if gap > 0:
            role = PRECEDING_CURRENT if lane == origin_lane else PRECEDING_TARGET
        else:
            role = FOLLOWING_CURRENT if lane == origin_lane else FOLLOWING_TARGET
        if role not in best or abs(gap) < best[role][0]:
            best[role] = (abs(gap), other.track.vehicle_id)
    return {role: vehicle_id for role, (_, vehicle_id) in best.items()}


def _adjacent(role, other, start, K, history, origin):
    positions = np.zeros((K, 2))
    speeds = np.zeros(K)
    present = np.zeros(K, dtype=bool)
    if other is None:
        return AdjacentTrack.absent(role, K)
    for k in range(K):
        index = other.track.index_of(start + k)
        if index >= 0:
            positions[k] = other.positions[index] - origin
            speeds[k] = other.speeds[index]
            present[k] = True
    lead_in = []
    for frame in range(start - 1, start - history - 1, -1):
        index = other.track.index_of(frame)
        if index < 0:
            break
        lead_in.append(other.positions[index] - origin)
    lead_in = np.array(lead_in[::-1]).reshape(-1, 2)
    return AdjacentTrack(role, positions, speeds, present, lead_in)


def _label_changes(track):
    """(index, origin lane, target lane) of every change between consecutive frames"""
    changes = []
    for index in range(1, len(track)):
        if track.lanes[index] != track.lanes[index - 1] and track.frames[index] == track.frames[index - 1] + 1:
            changes.append((index, int(track.lanes[index - 1]), int(track.lanes[index])))
    return changes


def extract_lane_changes(tracks, dt=0.1, vicinity=100.0, smoothing_window=0.5, history=5, source='', log=None):
    """
    One Scenario per lane-label change with full coverage of the window.

    Skipped changes are logged with their reason; ``log`` (a list) also
    receives one entry per change found.
    """
    lead = int(round(LEAD_IN / dt))
    K = int(round((LEAD_IN + FOLLOW_THROUGH) / dt))
    prepared = {track.vehicle_id: _prepare(track, dt, smoothing_window) for track in tracks}
    smoothed = {vehicle_id: item.positions for vehicle_id, item in prepared.items()}
    scenarios = []
    log = log if log is not None else []

    def record(scenario_id, status, reason=''):
        log.append({'id': scenario_id, 'status': status, 'reason': reason})
        if status == 'skipped':
            logger.info('Skipped lane change %s: %s', scenario_id, reason)

    for ego in prepared.values():
        previous = None
        for index, origin_lane, target_lane in _label_changes(ego.track):
            lc_frame = int(ego.track.frames[index])
            scenario_id = f'{source or "recording"}_v{ego.track.vehicle_id}_f{lc_frame}'
            if previous is not None and lc_frame - previous <= K:
                previous = lc_frame
                record(scenario_id, 'skipped', 'another lane change within the window')
                continue
            previous = lc_frame
            start = lc_frame - lead
            if not ego.track.covers(start, start + K):
                record(scenario_id, 'skipped', 'incomplete window coverage')
                continue
            try:
                scenario = _build_scenario(scenario_id, prepared, ego, start, K, dt, origin_lane, target_lane,
                                           lc_frame, vicinity, history, smoothed, source)
            except LaneChangeError as e:
                record(scenario_id, 'skipped', e.message)
                continue
            record(scenario_id, 'accepted')
            scenarios.append(scenario)
    logger.info('Extracted %d lane changes from %d tracks', len(scenarios), len(tracks))
    return sorted(scenarios, key=lambda scenario: scenario.id)


def _build_scenario(scenario_id, prepared, ego, start, K, dt, origin_lane, target_lane, lc_frame, vicinity,
                    history, smoothed, source):
    first = ego.track.index_of(start)
    window = ego.positions[first:first + K + 1]
    origin = window[0].copy()

    x0 = State(0.0, 0.0, wrap_angle(float(ego.forward.psi[first])))
    controls = np.column_stack([ego.forward.v[first:first + K], ego.forward.omega[first:first + K]])
    trajectory = Trajectory.from_controls(x0, controls, dt)
    replay_error = float(np.max(np.hypot(*(trajectory.positions() - (window[1:] - origin)).T)))
    if replay_error > REPLAY_TOLERANCE:
        raise InvalidValueError(f'replayed controls miss the recorded path by {replay_error:.3f} m',
                                replay_error=replay_error)

    ids = _neighbours(prepared, ego, start, origin_lane, target_lane)
    adjacent = {}
    for role in (PRECEDING_CURRENT, PRECEDING_TARGET, FOLLOWING_CURRENT, FOLLOWING_TARGET):
        other = prepared.get(ids[role]) if role in ids else None
        adjacent[role] = _adjacent(role, other, start, K, history, origin)

    # the ego's own samples straddle both lanes during the change
    others = [item.track for item in prepared.values() if item is not ego]
    lanes = fit_lanes(others, (origin_lane, target_lane), vicinity,
                      center_y=ego.positions[ego.track.index_of(lc_frame), 1], frames=(start, start + K),
                      extent=(float(window[:, 1].min()), float(window[:, 1].max())), positions=smoothed)
    metadata = {
        'vehicle_id': ego.track.vehicle_id,
        'lane_change_frame': lc_frame,
        'origin_lane': origin_lane,
        'target_lane': target_lane,
        'adjacent_ids': {role: ids.get(role) for role in adjacent},
        'replay_error': replay_error,
    }
    return Scenario(scenario_id, trajectory, adjacent, lanes.translated(-origin), mean_traffic_speed(adjacent),
                    source, metadata)


@dataclass(frozen=True)
class SplitSpec:
    """Scenario id -> split name"""
    assignments: dict = field(default_factory=dict)
    source: str = ''

    def __post_init__(self):
        unknown = sorted({split for split in self.assignments.values() if split not in SPLITS})
        if unknown:
            raise InvalidValueError(f'Unknown split names {unknown}', splits=unknown)


def load_split_spec(path):
    """Read a JSON split file: {"source": ..., "train": [ids], "validation": [...], "test": [...]}"""
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ParseError(f'Split file not found: {path}', path=str(path))
    except json.JSONDecodeError as e:
        raise ParseError(f'Invalid split file {path}: {e}', path=str(path), row=e.lineno)
    assignments = {}
    for split_name in SPLITS:
        for scenario_id in data.get(split_name, []):
            if scenario_id in assignments:
                raise ParseError(f'Scenario {scenario_id} is assigned to two splits', path=str(path),
                                 field=split_name)
            assignments[scenario_id] = split_name
    return SplitSpec(assignments, data.get('source', ''))


def hash_split(scenario_id, seed=0):
    """Seeded 70/15/15 assignment from a hash of the scenario id"""
    digest = hashlib.sha256(f'{seed}:{scenario_id}'.encode()).digest()
    u = int.from_bytes(digest[:8], 'big') / 2 ** 64
    if u < 0.70:
        return 'train'
    if u < 0.85:
        return 'validation'
    return 'test'


def split(scenarios, spec=None, seed=0, source=''):
    """Datasets per split, by an explicit spec or by hashing ids"""
    if spec is not None:
        known = {scenario.id for scenario in scenarios}
        for scenario_id in sorted(set(spec.assignments) - known):
            logger.warning('Split file names unknown scenario %s', scenario_id)
        assign = spec.assignments.get
        source = source or spec.source
    else:
        def assign(scenario_id):
            return hash_split(scenario_id, seed)
    grouped = {name: [] for name in SPLITS}
    for scenario in sorted(scenarios, key=lambda item: item.id):
        name = assign(scenario.id)
        if name is None:
            logger.info('Scenario %s is not in the split file', scenario.id)
            continue
        grouped[name].append(scenario)
    return {name: Dataset(tuple(items), name, source) for name, items in grouped.items()}
