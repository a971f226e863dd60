"""
Reference predictors for adjacent cars and the unpredictability metric.

A predictor is any callable ``predictor(history, issue_k, horizon, dt)``
returning a ``(horizon, 2)`` array of positions for the steps
``issue_k + 1 .. issue_k + horizon`` given the positions observed up to
and including ``issue_k`` (oldest first). Predictions made elsewhere can
be plugged in through trace files (:func:`load_trace`).

The unpredictability of car i at step k is the mean Euclidean error of
the single prediction issued at ``k - t_n`` over the ``t_n`` steps that
followed it.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType

import numpy as np
import pandas as pd

from lanechange.errors import InvalidValueError, NotEnoughHistoryError, ParseError, TraceGapError
from lanechange.scenario import ROLES

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ('car_id', 'issue_step', 'future_step', 'x_hat', 'y_hat')


def cv_predict(history, issue_k, horizon, dt):
    """Constant velocity from the last two positions"""
    history = np.asarray(history, dtype=float).reshape(-1, 2)
    if history.shape[0] < 2:
        raise NotEnoughHistoryError('Constant-velocity prediction needs two positions',
                                    issue_k=issue_k, available=history.shape[0])
    velocity = (history[-1] - history[-2]) / dt
    ahead = dt * np.arange(1, horizon + 1)[:, None]
    return history[-1] + ahead * velocity


def ca_predict(history, issue_k, horizon, dt):
    """Constant acceleration from the last three positions"""
    history = np.asarray(history, dtype=float).reshape(-1, 2)
    if history.shape[0] < 3:
        raise NotEnoughHistoryError('Constant-acceleration prediction needs three positions',
                                    issue_k=issue_k, available=history.shape[0])
    p2, p1, p0 = history[-3], history[-2], history[-1]
    # second-order backward differences, exact for quadratic motion
    velocity = (3.0 * p0 - 4.0 * p1 + p2) / (2.0 * dt)
    acceleration = (p0 - 2.0 * p1 + p2) / dt ** 2
    ahead = dt * np.arange(1, horizon + 1)[:, None]
    return p0 + ahead * velocity + 0.5 * ahead ** 2 * acceleration


PREDICTORS = {
    'cv': cv_predict,
    'ca': ca_predict,
}


def get_predictor(name):
    try:
        return PREDICTORS[name]
    except KeyError:
        raise InvalidValueError(f'Unknown predictor {name!r}', predictor=name, known=sorted(PREDICTORS))


@dataclass(frozen=True)
class PredictionTrace:
    """Predictions per car role and issue step, each ``(horizon, 2)``"""
    horizon: int
    predictions: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.horizon < 1:
            raise InvalidValueError('Trace horizon must be at least one step', horizon=self.horizon)
        frozen = {}
        for role, by_issue in self.predictions.items():
            items = {}
            for issue_k, points in by_issue.items():
                points = np.array(points, dtype=float)
                if points.shape != (self.horizon, 2):
                    raise InvalidValueError('Prediction has the wrong shape', car=role, issue_k=issue_k,
                                            shape=points.shape)
                points.setflags(write=False)
                items[int(issue_k)] = points
            frozen[role] = MappingProxyType(items)
        object.__setattr__(self, 'predictions', MappingProxyType(frozen))

    def get(self, role, issue_k):
        return self.predictions.get(role, {}).get(int(issue_k))

    def merged(self, other):
        if other.horizon != self.horizon:
            raise InvalidValueError('Cannot merge traces with different horizons')
        combined = {role: dict(items) for role, items in self.predictions.items()}
        for role, items in other.predictions.items():
            combined.setdefault(role, {}).update(items)
        return PredictionTrace(self.horizon, combined)


@dataclass(frozen=True)
class UnpredictabilitySeries:
    """z per car role, one value (m) per step; zero before t_n"""
    t_n: int
    z: dict

    def __post_init__(self):
        frozen = {}
        for role in ROLES:
            values = np.array(self.z[role], dtype=float)
            values.setflags(write=False)
            frozen[role] = values
        object.__setattr__(self, 'z', MappingProxyType(frozen))

    def __getitem__(self, role):
        return self.z[role]

    @classmethod
    def zeros(cls, K, t_n=2):
        return cls(t_n, {role: np.zeros(K) for role in ROLES})


def _observed_history(track, issue_k):
    """Positions known at ``issue_k``: the trailing run of present samples"""
    present = track.present[:issue_k + 1]
    if not present[-1]:
        return np.zeros((0, 2))
    absent = np.flatnonzero(~present)
    if absent.size:
        return track.positions[absent[-1] + 1:issue_k + 1]
    return np.vstack([track.history, track.positions[:issue_k + 1]])


def build_trace(track, predictor, horizon, dt):
    """
    Issue a prediction at every step where the car has two or more observed
    positions. Predictors that need a longer history fall back to constant
    velocity until it is available.
    """
    by_issue = {}
    for issue_k in range(track.K):
        history = _observed_history(track, issue_k)
        if history.shape[0] < 2:
            continue
        try:
            by_issue[issue_k] = predictor(history, issue_k, horizon, dt)
        except NotEnoughHistoryError:
            by_issue[issue_k] = cv_predict(history, issue_k, horizon, dt)
    return PredictionTrace(horizon, {track.role: by_issue})


def build_traces(scenario, predictor='cv', horizon=2):
    """Prediction trace for all four adjacent cars of a scenario"""
    if isinstance(predictor, str):
        predictor = get_predictor(predictor)
    trace = PredictionTrace(horizon, {})
    for role in ROLES:
        trace = trace.merged(build_trace(scenario.adjacent[role], predictor, horizon, scenario.dt))
    return trace


def unpredictability(trace, truth, t_n, strict=True):
    """
    Rolling mean Euclidean prediction error z for one car.

    z[k] averages the error of the prediction issued at ``k - t_n`` over
    steps ``k - t_n + 1 .. k``. Steps before ``t_n`` and steps where the
    car is missing anywhere in ``k - t_n .. k`` are zero, as are steps
    whose issue step has fewer than two observed positions. Any other
    missing prediction is a TraceGapError when ``strict``, otherwise z is
    zero there.
    """
    if t_n < 1:
        raise InvalidValueError('Lookback t_n must be at least one step', t_n=t_n)
    if trace.horizon < t_n:
        raise InvalidValueError('Trace horizon shorter than the lookback', horizon=trace.horizon, t_n=t_n)
    z = np.zeros(truth.K)
    for k in range(t_n, truth.K):
        issue_k = k - t_n
        if not np.all(truth.present[issue_k:k + 1]):
            continue
        predicted = trace.get(truth.role, issue_k)
        if predicted is None:
            if not strict or _observed_history(truth, issue_k).shape[0] < 2:
                continue
            raise TraceGapError(f'No prediction for {truth.role} issued at step {issue_k}',
                                car=truth.role, k=issue_k)
        error = truth.positions[issue_k + 1:k + 1] - predicted[:t_n]
        z[k] = np.mean(np.sqrt(np.sum(error ** 2, axis=1)))
    return z


def scenario_unpredictability(scenario, t_n=2, predictor='cv', trace=None, strict=True):
    """z-series of all four adjacent cars, from a predictor or a loaded trace"""
    if trace is None:
        trace = build_traces(scenario, predictor, horizon=t_n)
    return UnpredictabilitySeries(t_n, {role: unpredictability(trace, scenario.adjacent[role], t_n, strict)
                                        for role in ROLES})


def save_trace(trace, path):
    """Write a trace file: one row per (car_id, issue_step, future_step)"""
    rows = []
    for role in ROLES:
        for issue_k, points in sorted(trace.predictions.get(role, {}).items()):
            for offset, (x_hat, y_hat) in enumerate(points, start=1):
                rows.append((role, issue_k, issue_k + offset, x_hat, y_hat))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=list(TRACE_COLUMNS)).to_csv(path, index=False)
    return path


def load_trace(path):
    """Parse and validate a trace file"""
    try:
        frame = pd.read_csv(path, dtype={'car_id': str})
    except FileNotFoundError:
        raise ParseError(f'Trace file not found: {path}', path=str(path))
    except pd.errors.EmptyDataError:
        raise ParseError(f'Trace file is empty: {path}', path=str(path))

    missing = [column for column in TRACE_COLUMNS if column not in frame.columns]
    if missing:
        raise ParseError(f'Trace file is missing columns {missing}', path=str(path), field=missing[0])

    for column in TRACE_COLUMNS[1:]:
        values = pd.to_numeric(frame[column], errors='coerce')
        bad = values.isna() | ~np.isfinite(values.fillna(0.0))
        if bad.any():
            # header is line 1
            raise ParseError(f'Non-numeric value in column {column}', path=str(path),
                             row=int(bad.idxmax()) + 2, field=column)
        frame[column] = values

    unknown = ~frame['car_id'].isin(ROLES)
    if unknown.any():
        raise ParseError(f'Unknown car_id {frame["car_id"][unknown].iloc[0]!r}', path=str(path),
                         row=int(unknown.idxmax()) + 2, field='car_id')

    offsets = frame['future_step'] - frame['issue_step']
    if frame.empty:
        raise ParseError('Trace file has no predictions', path=str(path))
    horizon = int(offsets.max())

    predictions = {}
    for (role, issue_k), group in frame.groupby(['car_id', 'issue_step'], sort=True):
        steps = group['future_step'].to_numpy() - issue_k
        if not np.array_equal(np.sort(steps), np.arange(1, horizon + 1)):
            raise ParseError(f'Prediction for {role} at step {int(issue_k)} does not cover the horizon',
                             path=str(path), row=int(group.index[0]) + 2, field='future_step')
        ordered = group.sort_values('future_step')
        predictions.setdefault(role, {})[int(issue_k)] = ordered[['x_hat', 'y_hat']].to_numpy()
    return PredictionTrace(horizon, predictions)
