"""
Vector-graphic snapshot of a scenario at one instant: lanes, car
rectangles and fading history of the expert, generated trajectories and
adjacent cars. The road is drawn with the longitudinal axis horizontal.
"""
import logging
from pathlib import Path

import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from lanechange.errors import InvalidValueError  # noqa: E402

logger = logging.getLogger(__name__)

CAR_LENGTH = 4.5
CAR_WIDTH = 1.8
HISTORY_STEPS = 10
COLORS = {'expert': 'black', 'adjacent': 'tab:gray'}
GENERATED_COLORS = ('tab:blue', 'tab:red', 'tab:green', 'tab:orange')


def _car(ax, x, y, color, alpha):
    # longitudinal y is drawn horizontally
    ax.add_patch(Rectangle((y - CAR_LENGTH / 2, x - CAR_WIDTH / 2), CAR_LENGTH, CAR_WIDTH,
                           facecolor=color, edgecolor=color, alpha=alpha))


def _history(ax, points, color, label=None):
    count = len(points)
    for i, (x, y) in enumerate(points):
        alpha = 0.1 + 0.5 * (i + 1) / count
        ax.plot([y], [x], 'o', color=color, alpha=alpha, markersize=2)
    if label:
        ax.plot([], [], 's', color=color, label=label)


def _lane_lines(ax, lanes, y_range):
    for line, style in ((lanes.current_line, ':'), (lanes.target_line, '--')):
        if abs(line.direction[1]) < 1e-12:
            continue
        ys = np.array(y_range)
        t = (ys - line.point[1]) / line.direction[1]
        xs = line.point[0] + t * line.direction[0]
        ax.plot(ys, xs, style, color='tab:olive', linewidth=0.8)
        normal = np.array([line.direction[1], -line.direction[0]])
        for side in (-0.5, 0.5):
            offset = side * lanes.w * normal[0]
            ax.plot(ys, xs + offset, '-', color='lightgray', linewidth=0.6)


def render_snapshot(scenario, generated, time, out):
    """
    Draw ``scenario`` at ``time`` seconds with the labelled generated
    trajectories (label -> Trajectory) and write an SVG to ``out``.
    """
    k = int(round(time / scenario.dt))
    if not 0 <= k < scenario.K:
        raise InvalidValueError('Snapshot time outside the window', time=time, K=scenario.K, dt=scenario.dt)

    plt.rcParams['svg.hashsalt'] = 'lanechange'
    figure, ax = plt.subplots(figsize=(10, 3))
    lo = max(0, k - HISTORY_STEPS)

    trajectories = [('expert', scenario.ego, COLORS['expert'])]
    for index, (label, trajectory) in enumerate(generated.items()):
        trajectories.append((label, trajectory, GENERATED_COLORS[index % len(GENERATED_COLORS)]))

    all_y = []
    for label, trajectory, color in trajectories:
        states = trajectory.step_states()
        _history(ax, states[lo:k, :2], color, label)
        _car(ax, states[k, 0], states[k, 1], color, 0.8)
        all_y.append(states[:, 1])

    for role, track in scenario.adjacent.items():
        if not track.present[k]:
            continue
        seen = track.present[lo:k]
        _history(ax, track.positions[lo:k][seen], COLORS['adjacent'])
        _car(ax, track.positions[k, 0], track.positions[k, 1], COLORS['adjacent'], 0.6)
        ax.annotate(role, (track.positions[k, 1], track.positions[k, 0] + CAR_WIDTH), fontsize=6,
                    ha='center')
        all_y.append(track.positions[track.present, 1])

    y = np.concatenate(all_y)
    _lane_lines(ax, scenario.lanes, (float(y.min()) - 10.0, float(y.max()) + 10.0))
    ax.set_xlabel('longitudinal (m)')
    ax.set_ylabel('lateral (m)')
    ax.set_title(f'{scenario.id} at t = {k * scenario.dt:.1f} s', fontsize=9)
    ax.set_aspect('equal', adjustable='datalim')
    ax.legend(loc='upper left', fontsize=7)

    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    figure.savefig(out, format='svg', metadata={'Date': None}, bbox_inches='tight')
    plt.close(figure)
    logger.info('Wrote snapshot %s', out)
    return out
