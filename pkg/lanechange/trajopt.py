"""
Single-shooting trajectory optimization.

The decision variable is the lifted control vector u = (v_0, omega_0, ...,
v_{K-1}, omega_{K-1}); states always come from rolling u out from the
scenario's initial state, so generated trajectories are dynamically
feasible by construction. The summed reward is maximized with scipy's
bounded L-BFGS-B on its negation.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from lanechange.errors import ConfigError, NonFiniteError
from lanechange.features import RewardFunction
from lanechange.optim import projected_gradient
from lanechange.scenario import Trajectory

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerSettings:
    max_iter: int = 500
    grad_tol: float = 1e-6
    step_tol: float = 1e-12
    restarts: int = 0
    restart_noise: float = 0.05
    v_max: float = 60.0
    omega_max: float = 1.0
    initial_guess: str = 'expert-speed'

    def __post_init__(self):
        if int(self.max_iter) < 1:
            raise ConfigError('Optimizer needs at least one iteration', max_iter=self.max_iter)
        if not (self.grad_tol > 0 and self.step_tol > 0):
            raise ConfigError('Optimizer tolerances must be positive', grad_tol=self.grad_tol,
                              step_tol=self.step_tol)
        if int(self.restarts) < 0 or self.restart_noise < 0:
            raise ConfigError('Restarts and restart noise must be non-negative', restarts=self.restarts)
        if not (self.v_max > 0 and self.omega_max > 0):
            raise ConfigError('Control bounds must be positive', v_max=self.v_max, omega_max=self.omega_max)
        if self.initial_guess not in ('expert-speed', 'expert'):
            raise ConfigError(f'Unknown initial guess policy {self.initial_guess!r}',
                              initial_guess=self.initial_guess)

    @classmethod
    def from_mapping(cls, values, **overrides):
        known = {key: values[key] for key in cls.__dataclass_fields__ if key in values}
        known.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**known)

    def bounds(self, K):
        return [(0.0, self.v_max), (-self.omega_max, self.omega_max)] * K


@dataclass(frozen=True)
class ConvergenceReport:
    iterations: int
    grad_norm: float
    reward: float
    converged: bool
    message: str
    restart: int = 0
    evaluations: int = 0
    rewards: tuple = field(default_factory=tuple)

    def to_dict(self):
        return {
            'iterations': self.iterations,
            'grad_norm': self.grad_norm,
            'reward': self.reward,
            'converged': self.converged,
            'message': self.message,
            'restart': self.restart,
            'evaluations': self.evaluations,
            'rewards': list(self.rewards),
        }


@dataclass(frozen=True)
class OptimizationResult:
    trajectory: Trajectory
    reward: float
    report: ConvergenceReport


def reward_of(traj, scenario, theta, cfg, norm, z=None):
    """theta^T (normalized feature sums) of ``traj`` and its gradient w.r.t. the lifted controls"""
    function = RewardFunction(scenario, cfg, norm, z, x0=traj.x0)
    return function.value_and_gradient(traj.controls.reshape(-1), theta)


def initial_controls(scenario, settings):
    """Constant guess: the expert's initial speed and zero turn rate"""
    K = scenario.K
    if settings.initial_guess == 'expert':
        guess = np.array(scenario.ego.controls, dtype=float)
    else:
        guess = np.zeros((K, 2))
        guess[:, 0] = scenario.ego.controls[0, 0]
    guess[:, 0] = np.clip(guess[:, 0], 0.0, settings.v_max)
    guess[:, 1] = np.clip(guess[:, 1], -settings.omega_max, settings.omega_max)
    return guess.reshape(-1)


class _Objective:
    """Negated reward for scipy, remembering the value at every evaluated point"""

    def __init__(self, function, theta):
        self.function = function
        self.theta = theta
        self.evaluations = 0
        self._values = {}

    def __call__(self, u):
        self.evaluations += 1
        value, gradient = self.function.value_and_gradient(u, self.theta)
        if not (math.isfinite(value) and np.all(np.isfinite(gradient))):
            located = self.function.first_non_finite(u)
            feature, step = located if located else (None, None)
            raise NonFiniteError('Non-finite reward during trajectory optimization', id=self.function.scenario.id,
                                 feature=feature, step=step)
        self._values[u.tobytes()] = value
        return -value, -gradient

    def value_at(self, u):
        key = np.asarray(u, dtype=float).tobytes()
        if key not in self._values:
            self(np.asarray(u, dtype=float))
        return self._values[key]


def _solve(function, theta, guess, settings, restart):
    objective = _Objective(function, theta)
    rewards = [objective.value_at(guess)]
    result = minimize(objective, guess, jac=True, method='L-BFGS-B', bounds=settings.bounds(len(guess) // 2),
                      callback=lambda u: rewards.append(objective.value_at(u)),
                      options={'maxiter': int(settings.max_iter), 'gtol': settings.grad_tol,
                               'ftol': settings.step_tol})
    u = np.asarray(result.x, dtype=float)
    value, gradient = function.value_and_gradient(u, theta)
    lower = np.array([bound[0] for bound in settings.bounds(len(u) // 2)])
    upper = np.array([bound[1] for bound in settings.bounds(len(u) // 2)])
    grad_norm = float(np.max(np.abs(projected_gradient(u, gradient, lower, upper))))
    report = ConvergenceReport(
        iterations=int(result.nit),
        grad_norm=grad_norm,
        reward=value,
        converged=grad_norm <= settings.grad_tol,
        message=str(result.message),
        restart=restart,
        evaluations=objective.evaluations,
        rewards=tuple(rewards),
    )
    return u, value, report


def optimize(scenario, theta, cfg, norm, settings=None, z=None, seed=0):
    """
    Locally maximize the summed reward over the scenario's horizon.

    Restarts perturb the constant initial guess with seeded Gaussian
    noise; the best restart is kept, the earliest on ties.
    """
    settings = settings or OptimizerSettings()
    function = RewardFunction(scenario, cfg, norm, z)
    base = initial_controls(scenario, settings)
    scale = np.tile([max(float(base[0]), 1.0), settings.omega_max], scenario.K)
    rng = np.random.default_rng(seed)

    best = None
    for restart in range(int(settings.restarts) + 1):
        guess = base
        if restart:
            guess = base + settings.restart_noise * scale * rng.standard_normal(base.shape)
            guess = np.clip(guess, [b[0] for b in settings.bounds(scenario.K)],
                            [b[1] for b in settings.bounds(scenario.K)])
        u, value, report = _solve(function, theta, guess, settings, restart)
        logger.debug('Scenario %s restart %d: reward %.6g, grad norm %.3g', scenario.id, restart, value,
                     report.grad_norm)
        if best is None or value > best[1]:
            best = (u, value, report)

    u, value, report = best
    if not report.converged:
        logger.warning('Optimization of %s stopped before convergence: %s (grad norm %.3g)', scenario.id,
                       report.message, report.grad_norm)
    trajectory = Trajectory.from_controls(scenario.ego.x0, u.reshape(-1, 2), scenario.dt)
    return OptimizationResult(trajectory, value, report)
