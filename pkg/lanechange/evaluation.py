"""
Evaluation of generated trajectories against experts: MEE, Average MEE,
percent improvement, distances to adjacent cars and the report tables.
"""
import logging
import math
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

from lanechange.errors import InvalidValueError

logger = logging.getLogger(__name__)

STATE_COLUMNS = ('x', 'y', 'psi')


class MinDistance(NamedTuple):
    distance: float
    observed: bool


def _check_pair(generated, expert):
    if generated.K != expert.K or not math.isclose(generated.dt, expert.dt):
        raise InvalidValueError('Trajectories differ in horizon or time step', K=(generated.K, expert.K),
                                dt=(generated.dt, expert.dt))


def _errors(generated, expert):
    _check_pair(generated, expert)
    difference = generated.positions() - expert.positions()
    return np.hypot(difference[:, 0], difference[:, 1])


def mee(generated, expert):
    """Per-step mean Euclidean position error (m)"""
    return float(np.mean(_errors(generated, expert)))


def mee_sum(generated, expert):
    """Summed Euclidean position error over the horizon (m)"""
    return float(np.sum(_errors(generated, expert)))


def mean_std(values):
    """Sample mean and (n - 1) standard deviation; std is 0 for one value"""
    values = np.asarray(list(values), dtype=float)
    if values.size == 0:
        raise InvalidValueError('Cannot average an empty set')
    std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    return float(np.mean(values)), std


def avg_mee(pairs):
    """Average MEE, mean and std, over (generated, expert) pairs"""
    return mean_std(mee(generated, expert) for generated, expert in pairs)


def improvement(mee_w, mee_wplus):
    """Percent reduction of the second model's error relative to the first"""
    if mee_w == 0:
        raise InvalidValueError('Improvement is undefined for a zero baseline error', mee_w=mee_w)
    return 100.0 * (mee_w - mee_wplus) / mee_w


def min_distance(trajectory, track):
    """Closest approach between the ego (x_0 .. x_{K-1}) and a car where it is present"""
    if trajectory.K != track.K:
        raise InvalidValueError('Track does not match trajectory horizon', K=(trajectory.K, track.K))
    if not np.any(track.present):
        return MinDistance(math.inf, False)
    ego = trajectory.step_states()[:, :2]
    distance = np.hypot(*(ego - track.positions)[track.present].T)
    return MinDistance(float(distance.min()), True)


def state_bands(trajectories):
    """Per-step mean and 3-sigma band of x, y and psi over trajectories"""
    trajectories = list(trajectories)
    if not trajectories:
        raise InvalidValueError('state_bands needs at least one trajectory')
    states = np.stack([trajectory.states for trajectory in trajectories])
    dt = trajectories[0].dt
    frame = pd.DataFrame({'step': np.arange(1, states.shape[1] + 1)})
    frame['time'] = frame['step'] * dt
    for index, name in enumerate(STATE_COLUMNS):
        values = states[:, :, index]
        mean = values.mean(axis=0)
        std = values.std(axis=0, ddof=1) if len(trajectories) > 1 else np.zeros(states.shape[1])
        frame[f'{name}_mean'] = mean
        frame[f'{name}_lower'] = mean - 3.0 * std
        frame[f'{name}_upper'] = mean + 3.0 * std
    return frame


def time_series(expert, generated):
    """States of the expert and each labelled generated trajectory, one row per step"""
    frame = pd.DataFrame({'step': np.arange(expert.K + 1)})
    frame['time'] = frame['step'] * expert.dt
    for label, trajectory in [('expert', expert), *generated.items()]:
        states = np.vstack([trajectory.x0.as_array()[None, :], trajectory.states])
        for index, name in enumerate(STATE_COLUMNS):
            frame[f'{label}_{name}'] = states[:, index]
    return frame


def scenario_rows(experts, generated_a, generated_b):
    """Per-scenario errors for ids present in all three sets"""
    rows = []
    for scenario_id in sorted(experts):
        if scenario_id not in generated_a or scenario_id not in generated_b:
            logger.warning('Scenario %s is missing a generated trajectory; left out of the report', scenario_id)
            continue
        expert = experts[scenario_id]
        a, b = generated_a[scenario_id].ego, generated_b[scenario_id].ego
        rows.append({
            'id': scenario_id,
            'dataset': expert.source or 'all',
            'mee_w': mee(a, expert.ego),
            'mee_wplus': mee(b, expert.ego),
            'mee_sum_w': mee_sum(a, expert.ego),
            'mee_sum_wplus': mee_sum(b, expert.ego),
        })
    return pd.DataFrame(rows, columns=['id', 'dataset', 'mee_w', 'mee_wplus', 'mee_sum_w', 'mee_sum_wplus'])


def report(experts, generated_a, generated_b):
    """
    Table with one row per dataset label and a final 'all' row: number of
    trajectories, MEE mean and std of both models and percent improvement.
    """
    per_scenario = scenario_rows(experts, generated_a, generated_b)
    if per_scenario.empty:
        raise InvalidValueError('No scenario has both generated trajectories')
    groups = [(name, rows) for name, rows in per_scenario.groupby('dataset', sort=True)]
    if len(groups) > 1:
        groups.append(('all', per_scenario))
    table = []
    for name, rows in groups:
        w_mean, w_std = mean_std(rows['mee_w'])
        plus_mean, plus_std = mean_std(rows['mee_wplus'])
        table.append({
            'dataset': name,
            'n_traj': len(rows),
            'mee_w_mean': w_mean,
            'mee_w_std': w_std,
            'mee_wplus_mean': plus_mean,
            'mee_wplus_std': plus_std,
            'improvement_pct': improvement(w_mean, plus_mean) if w_mean > 0 else 0.0,
            'mee_sum_w_mean': float(rows['mee_sum_w'].mean()),
            'mee_sum_wplus_mean': float(rows['mee_sum_wplus'].mean()),
        })
    return pd.DataFrame(table), per_scenario


def format_table(table):
    """Aligned text rendering: # Traj., MEE_w, MEE_w+ as mean +- std, % Imp"""
    text = pd.DataFrame({
        'Dataset': table['dataset'],
        '# Traj.': table['n_traj'],
        'MEE_w': [f'{m:.2f} ± {s:.2f}' for m, s in zip(table['mee_w_mean'], table['mee_w_std'])],
        'MEE_w+': [f'{m:.2f} ± {s:.2f}' for m, s in zip(table['mee_wplus_mean'], table['mee_wplus_std'])],
        '% Imp': [f'{value:.2f}' for value in table['improvement_pct']],
    })
    return text.to_string(index=False) + '\n'


def write_report(table, per_scenario, out, bands=None):
    """Aligned text at ``out``, CSV tables beside it"""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(format_table(table))
    table.to_csv(out.with_suffix('.csv'), index=False, float_format='%.10g')
    per_scenario.to_csv(out.with_name(out.stem + '.scenarios.csv'), index=False, float_format='%.10g')
    for label, frame in (bands or {}).items():
        frame.to_csv(out.with_name(f'{out.stem}.bands.{label}.csv'), index=False, float_format='%.10g')
    return out
