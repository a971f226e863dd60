"""
Projected quasi-Newton ascent over a box.

Maximizes a smooth objective subject to ``lower <= x <= upper``. The
search direction is a BFGS inverse-Hessian model restricted to the free
variables; steps are projected onto the box and accepted by a projected
Armijo backtracking rule. An objective may raise
:class:`~lanechange.errors.NumericalError` at a trial point, which is
treated exactly like a failed sufficient-increase test.

The weight fit uses this routine and not scipy.optimize: its likelihood
is undefined wherever the reward Hessian cannot be regularized to
negative definite, and scipy's bounded solvers cannot back off from a
trial point whose objective raises. Accepted values never decrease.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from lanechange.errors import NumericalError

logger = logging.getLogger(__name__)

ARMIJO = 1e-4
MAX_BACKTRACKS = 40
CURVATURE_EPS = 1e-10


@dataclass
class AscentResult:
    x: np.ndarray
    value: float
    gradient: np.ndarray
    iterations: int
    grad_norm: float
    converged: bool
    message: str
    history: list = field(default_factory=list)
    rejected: int = 0


def projected_gradient(x, gradient, lower, upper):
    """Ascent step to the box boundary along the gradient, per coordinate"""
    return np.clip(x + gradient, lower, upper) - x


def _free(x, gradient, lower, upper):
    at_lower = (x <= lower) & (gradient < 0)
    at_upper = (x >= upper) & (gradient > 0)
    return ~(at_lower | at_upper)


def maximize_box(objective, x0, lower, upper, max_iter=200, grad_tol=1e-6, step_tol=1e-12, callback=None):
    """
    Maximize ``objective(x) -> (value, gradient)`` over the box.

    ``max_iter = 0`` returns the (projected) starting point. ``callback``
    is called with ``(iteration, x, value, grad_norm)`` after each
    accepted step.
    """
    lower = np.broadcast_to(np.asarray(lower, dtype=float), np.shape(x0)).copy()
    upper = np.broadcast_to(np.asarray(upper, dtype=float), np.shape(x0)).copy()
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    value, gradient = objective(x)
    n = x.size
    inverse = None
    history = []
    rejected = 0

    grad_norm = float(np.max(np.abs(projected_gradient(x, gradient, lower, upper)), initial=0.0))
    history.append({'iteration': 0, 'value': value, 'grad_norm': grad_norm})
    if grad_norm <= grad_tol:
        return AscentResult(x, value, gradient, 0, grad_norm, True, 'gradient tolerance reached', history)

    message = 'iteration limit reached'
    iteration = 0
    while iteration < max_iter:
        free = _free(x, gradient, lower, upper)
        if inverse is None:
            # unit-length first step, independent of objective scale
            direction = np.where(free, gradient, 0.0)
            direction = direction / max(np.linalg.norm(direction), 1e-300)
        else:
            direction = np.zeros(n)
            direction[free] = inverse[np.ix_(free, free)] @ gradient[free]
            if direction @ gradient <= 0:
                inverse = None
                continue

        accepted = _line_search(objective, x, value, gradient, direction, lower, upper)
        rejected += accepted['rejected']
        if accepted['x'] is None:
            if inverse is not None:
                logger.debug('Line search failed at iteration %d; resetting curvature model', iteration)
                inverse = None
                continue
            message = 'line search failed'
            break

        iteration += 1
        x_new, value_new, gradient_new = accepted['x'], accepted['value'], accepted['gradient']
        s = x_new - x
        y = gradient - gradient_new
        curvature = s @ y
        if curvature > CURVATURE_EPS * np.linalg.norm(s) * np.linalg.norm(y):
            if inverse is None:
                inverse = np.eye(n) * (curvature / (y @ y))
            rho = 1.0 / curvature
            left = np.eye(n) - rho * np.outer(s, y)
            inverse = left @ inverse @ left.T + rho * np.outer(s, s)

        x, value, gradient = x_new, value_new, gradient_new
        grad_norm = float(np.max(np.abs(projected_gradient(x, gradient, lower, upper)), initial=0.0))
        history.append({'iteration': iteration, 'value': value, 'grad_norm': grad_norm})
        if callback is not None:
            callback(iteration, x, value, grad_norm)
        if grad_norm <= grad_tol:
            message = 'gradient tolerance reached'
            break
        if np.max(np.abs(s)) <= step_tol:
            message = 'step tolerance reached'
            break

    converged = message != 'line search failed' and message != 'iteration limit reached'
    return AscentResult(x, value, gradient, iteration, grad_norm, converged, message, history, rejected)


def _line_search(objective, x, value, gradient, direction, lower, upper):
    step = 1.0
    rejected = 0
    for _ in range(MAX_BACKTRACKS):
        trial = np.clip(x + step * direction, lower, upper)
        moved = trial - x
        if not np.any(moved):
            break
        try:
            trial_value, trial_gradient = objective(trial)
        except NumericalError as e:
            logger.debug('Rejected trial point: %s', e.message)
            rejected += 1
            step *= 0.5
            continue
        if np.isfinite(trial_value) and trial_value >= value + ARMIJO * max(gradient @ moved, 0.0):
            return {'x': trial, 'value': trial_value, 'gradient': trial_gradient, 'rejected': rejected}
        step *= 0.5
    return {'x': None, 'rejected': rejected}
