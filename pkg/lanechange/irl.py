"""
Laplace-approximated maximum-entropy IRL.

Around an expert's lifted controls the reward is expanded to second
order, g = dR/du and H = d2R/du2. The approximate log-likelihood of the
demonstration is

    L(theta) = 1/2 g^T H^-1 g + 1/2 log|-H| - d_u/2 log(2 pi)

Because the reward is linear in theta, g and H are assembled from
per-feature derivatives that are computed once per scenario.
"""
import itertools
import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky

from lanechange.errors import ConfigError, DivergenceError, NonFiniteError, NotPositiveDefiniteError
from lanechange.features import (FeatureConfig, RewardFunction, ThetaWeights, normalization_from,
                                 variant_features)
from lanechange.optim import maximize_box
from lanechange.tasks import run_parallel

logger = logging.getLogger(__name__)

LAMBDA_LADDER = (0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0)
INIT_SHRINKS = 10
SWEEP_KEYS = ('c', 't_p', 't_f', 'c_p', 'c_f')


@dataclass(frozen=True)
class PerFeatureDerivatives:
    """Gradients (p, d_u) and Hessians (p, d_u, d_u) of the normalized feature sums"""
    scenario_id: str
    names: tuple
    gradients: np.ndarray
    hessians: np.ndarray

    @property
    def d_u(self):
        return self.gradients.shape[1]

    def assemble(self, theta):
        values = _aligned(theta, self.names).values
        return values @ self.gradients, np.tensordot(values, self.hessians, axes=1)


@dataclass(frozen=True)
class LikelihoodParts:
    g: np.ndarray
    H: np.ndarray
    L: np.ndarray
    lam: float
    loglik: float
    lambda_history: tuple = ()

    @property
    def d_u(self):
        return self.g.shape[0]


@dataclass(frozen=True)
class FitSettings:
    max_iter: int = 200
    grad_tol: float = 1e-6
    theta_max: float = 1000.0
    lambda_ladder: tuple = LAMBDA_LADDER

    def __post_init__(self):
        if int(self.max_iter) < 0:
            raise ConfigError('max_iter must be non-negative', max_iter=self.max_iter)
        if not (self.grad_tol > 0 and self.theta_max > 0):
            raise ConfigError('grad_tol and theta_max must be positive', grad_tol=self.grad_tol,
                              theta_max=self.theta_max)
        ladder = tuple(float(lam) for lam in self.lambda_ladder)
        if not ladder or any(lam < 0 for lam in ladder) or list(ladder) != sorted(ladder):
            raise ConfigError('lambda_ladder must be a non-empty increasing list of non-negative values',
                              lambda_ladder=ladder)
        object.__setattr__(self, 'lambda_ladder', ladder)

    @classmethod
    def from_mapping(cls, values, **overrides):
        known = {key: values[key] for key in cls.__dataclass_fields__ if key in values}
        known.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**known)


@dataclass
class FitResult:
    theta: ThetaWeights
    normalization: object
    report: dict = field(default_factory=dict)


def _aligned(theta, names):
    if theta.names == tuple(names):
        return theta
    if not set(theta.names) <= set(names):
        raise ConfigError('Weights name features the derivatives do not have', theta=list(theta.names),
                          features=list(names))
    return theta.restricted(tuple(names))


def per_feature_derivatives(scenario, cfg, norm, variant=None, z=None):
    """First and second derivatives of each normalized feature sum at the expert controls"""
    if variant is not None:
        norm = norm.restricted(variant_features(variant))
    function = RewardFunction(scenario, cfg, norm, z)
    u = scenario.ego.controls.reshape(-1)
    gradients = function.jacobian(u)
    hessians = function.hessian(u)
    hessians = 0.5 * (hessians + np.swapaxes(hessians, 1, 2))
    for index, name in enumerate(norm.names):
        bad = np.flatnonzero(~np.isfinite(gradients[index]))
        if bad.size == 0:
            bad = np.flatnonzero(~np.all(np.isfinite(hessians[index]), axis=1))
        if bad.size:
            raise NonFiniteError(f'Non-finite derivative of feature {name}', id=scenario.id, feature=name,
                                 step=int(bad[0]) // 2)
    return PerFeatureDerivatives(scenario.id, norm.names, gradients, hessians)


def _regularized_cholesky(H, ladder):
    """Lower Cholesky factor of -(H - lam I) for the first lam on the ladder that works"""
    tried = []
    identity = np.eye(H.shape[0])
    for lam in ladder:
        tried.append(lam)
        try:
            L = cholesky(-(H - lam * identity), lower=True)
        except LinAlgError:
            continue
        if np.all(np.isfinite(L)) and np.all(np.diag(L) > 0):
            return L, lam, tuple(tried)
    raise NotPositiveDefiniteError('Reward Hessian could not be regularized to negative definite',
                                   lambda_history=tried)


def log_likelihood(parts, theta, ladder=LAMBDA_LADDER):
    """Laplace log-likelihood of one demonstration"""
    g, H = parts.assemble(theta)
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
        raise NonFiniteError('Non-finite reward derivatives', id=parts.scenario_id)
    L, lam, tried = _regularized_cholesky(H, ladder)
    if lam > 0:
        logger.debug('Regularized Hessian of %s with lambda %g', parts.scenario_id, lam)
    # a = (-H_reg)^-1 g, so g^T H_reg^-1 g = -g^T a
    a = cho_solve((L, True), g)
    d_u = g.shape[0]
    loglik = -0.5 * float(g @ a) + float(np.sum(np.log(np.diag(L)))) - 0.5 * d_u * math.log(2.0 * math.pi)
    if not math.isfinite(loglik):
        raise NonFiniteError('Non-finite log-likelihood', id=parts.scenario_id, lam=lam)
    return LikelihoodParts(g, H, L, lam, loglik, tried)


def log_likelihood_grad(parts, theta, likelihood=None, ladder=LAMBDA_LADDER):
    """
    dL/dtheta_j = g_j^T b - 1/2 b^T H_j b + 1/2 tr(H^-1 H_j), b = H^-1 g,
    at the regularized Hessian.
    """
    likelihood = likelihood or log_likelihood(parts, theta, ladder)
    L = likelihood.L
    b = -cho_solve((L, True), likelihood.g)
    # (-H_reg)^-1, so H_reg^-1 = -inverse
    inverse = cho_solve((L, True), np.eye(likelihood.d_u))
    first = parts.gradients @ b
    second = np.einsum('a,jab,b->j', b, parts.hessians, b)
    trace = -np.einsum('ab,jab->j', inverse, parts.hessians)
    return first - 0.5 * second + 0.5 * trace


class DatasetLikelihood:
    """Sum of per-scenario likelihoods in a fixed order"""

    def __init__(self, derivatives, ladder=LAMBDA_LADDER):
        self.derivatives = list(derivatives)
        self.names = self.derivatives[0].names
        self.ladder = ladder
        self.lambda_max = 0.0

    def __call__(self, values):
        theta = ThetaWeights(self.names, values)
        total = 0.0
        gradient = np.zeros(len(self.names))
        lambda_max = 0.0
        for parts in self.derivatives:
            likelihood = log_likelihood(parts, theta, self.ladder)
            total += likelihood.loglik
            gradient += log_likelihood_grad(parts, theta, likelihood, self.ladder)
            lambda_max = max(lambda_max, likelihood.lam)
        if not (math.isfinite(total) and np.all(np.isfinite(gradient))):
            raise NonFiniteError('Non-finite dataset likelihood', theta=values)
        self.lambda_max = lambda_max
        return total, gradient


def _initial_theta(objective, p):
    theta = np.ones(p)
    trace = []
    for _ in range(INIT_SHRINKS + 1):
        try:
            value, gradient = objective(theta)
            return theta, value, gradient
        except (NonFiniteError, NotPositiveDefiniteError) as e:
            trace.append({'scale': float(theta[0]), 'error': type(e).__name__})
            theta = theta / 10.0
    raise DivergenceError('No finite likelihood for the initial weights', iterations=trace)


def fit(scenarios, variant, cfg, settings=None, normalization=None, z_series=None, jobs=1, seed=0):
    """
    Maximize the summed Laplace log-likelihood over theta in [0, theta_max].

    Normalization constants are computed from the training experts unless
    given. Returns the weights, the constants and a training report.
    """
    settings = settings or FitSettings()
    names = variant_features(variant)
    if not scenarios:
        raise ConfigError('Training needs at least one scenario', variant=variant)
    if normalization is None:
        normalization = normalization_from(scenarios, cfg, variant, z_series)
    else:
        normalization = normalization.restricted(names)

    def derivatives(index):
        z = z_series[index] if z_series is not None else None
        return per_feature_derivatives(scenarios[index], cfg, normalization, z=z)

    parts = run_parallel(derivatives, range(len(scenarios)), jobs)
    objective = DatasetLikelihood(parts, settings.lambda_ladder)
    theta0, value0, _ = _initial_theta(objective, len(names))

    events = []

    def record(iteration, x, value, grad_norm):
        if objective.lambda_max > 0:
            events.append({'iteration': iteration, 'lambda': objective.lambda_max})
        logger.info('IRL iteration %d: loglik %.6f, grad norm %.3g', iteration, value, grad_norm)

    if int(settings.max_iter) == 0:
        result_x, result_value, iterations, grad_norm, converged, message, history = (
            theta0, value0, 0, None, False, 'no iterations requested',
            [{'iteration': 0, 'value': value0, 'grad_norm': None}])
    else:
        result = maximize_box(objective, theta0, 0.0, settings.theta_max, max_iter=int(settings.max_iter),
                              grad_tol=settings.grad_tol, callback=record)
        result_x, result_value = result.x, result.value
        iterations, grad_norm = result.iterations, result.grad_norm
        converged, message, history = result.converged, result.message, result.history
        if not converged:
            logger.warning('IRL stopped before convergence: %s', message)

    theta = ThetaWeights(names, result_x)
    report = {
        'variant': variant,
        'seed': seed,
        'n_scenarios': len(scenarios),
        'scenario_ids': [scenario.id for scenario in scenarios],
        'feature_config': cfg.to_dict(),
        'initial_theta': theta0.tolist(),
        'iterations': [{'iteration': entry['iteration'], 'loglik': entry['value'], 'grad_norm': entry['grad_norm']}
                       for entry in history],
        'lambda_events': events,
        'n_iterations': iterations,
        'final_loglik': result_value,
        'final_grad_norm': grad_norm,
        'converged': converged,
        'message': message,
        'theta': theta.as_dict(),
    }
    return FitResult(theta, normalization, report)


def load_grid(path):
    """Read a sweep grid file: lists of values for any of c, t_p, t_f, c_p, c_f"""
    try:
        with open(path, 'rb') as handle:
            data = tomllib.load(handle)
    except FileNotFoundError:
        raise ConfigError(f'Sweep grid not found: {path}', path=str(path))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f'Sweep grid is not valid TOML: {e}', path=str(path))
    unknown = sorted(set(data) - set(SWEEP_KEYS))
    if unknown:
        raise ConfigError(f'Unknown sweep keys {unknown}', path=str(path))
    return {key: [float(v) for v in (data[key] if isinstance(data[key], list) else [data[key]])]
            for key in SWEEP_KEYS if key in data}


def grid_points(grid, base=None):
    """Feature configs of the cartesian product in (c, t_p, t_f, c_p, c_f) order"""
    base = base or FeatureConfig()
    if not grid or any(len(values) == 0 for values in grid.values()):
        raise ConfigError('Sweep grid is empty')
    axes = [grid.get(key) or [getattr(base, key)] for key in SWEEP_KEYS]
    return [base.replace(**dict(zip(SWEEP_KEYS, point))) for point in itertools.product(*axes)]


def hyperparameter_sweep(scenarios, variant, grid, base_cfg=None, fit_settings=None, optimizer_settings=None,
                         z_series=None, jobs=1, seed=0):
    """
    Fit theta per grid point and keep the point whose regenerated training
    trajectories have the smallest Average MEE.
    """
    from lanechange.evaluation import mean_std, mee
    from lanechange.trajopt import optimize

    points = grid_points(grid, base_cfg)
    rows = []
    best = None
    for index, cfg in enumerate(points):
        fitted = fit(scenarios, variant, cfg, fit_settings, z_series=z_series, jobs=jobs, seed=seed)

        def regenerate(n):
            z = z_series[n] if z_series is not None else None
            result = optimize(scenarios[n], fitted.theta, cfg, fitted.normalization, optimizer_settings, z, seed)
            return mee(result.trajectory, scenarios[n].ego)

        errors = run_parallel(regenerate, range(len(scenarios)), jobs)
        mean, std = mean_std(errors)
        rows.append({'index': index, **cfg.to_dict(), 'avg_mee': mean, 'std_mee': std,
                     'loglik': fitted.report['final_loglik'], 'theta': fitted.theta.as_dict()})
        logger.info('Sweep point %d/%d %s: Average MEE %.4f', index + 1, len(points), cfg.to_dict(), mean)
        key = (mean, cfg.c_p + cfg.c_f, index)
        if best is None or key < best[0]:
            best = (key, cfg, fitted)

    _, cfg, fitted = best
    fitted.report['sweep'] = rows
    fitted.report['selected'] = cfg.to_dict()
    return cfg, fitted, rows
