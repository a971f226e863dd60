"""
Lane-change reward features, normalization and the linear reward.

Every feature is a penalty (<= 0 per step):

    d   lateral deviation from the target centerline  -exp(d_k / w)
    v   deviation from the mean traffic speed         -(v_k - v_d)^2
    a   angular speed                                 -omega_k^2
    p   soft time-to-collision with preceding cars
    f   soft time-to-collision with the target-lane follower
    pz  p with the distance shrunk by unpredictability  c_p * z^2
    fz  f with the distance shrunk by unpredictability  c_f * z^2

The per-step kernels are written once with jax.numpy; the scalar
operations, the trajectory sums and the derivatives used by trajectory
optimization and IRL all go through them.
"""
import json
import math
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from lanechange.dynamics import rollout_jax
from lanechange.errors import ConfigError, InvalidValueError, ParseError
from lanechange.scenario import FOLLOWING_TARGET, PRECEDING_ROLES

ALL_FEATURES = ('d', 'v', 'a', 'p', 'f', 'pz', 'fz')
BASELINE = ALL_FEATURES[:5]
UNPREDICTABILITY_AWARE = ALL_FEATURES

VARIANTS = {
    'baseline': BASELINE,
    'unpred': UNPREDICTABILITY_AWARE,
}

MODEL_FORMAT = 'lanechange-model/1'


def variant_features(variant):
    try:
        return VARIANTS[variant]
    except KeyError:
        raise ConfigError(f'Unknown variant {variant!r}', variant=variant, known=sorted(VARIANTS))


@dataclass(frozen=True)
class FeatureConfig:
    """Hyperparameters of the TTC features"""
    c: float = 1.0
    t_p: float = 2.0
    t_f: float = 2.0
    c_p: float = 10.0
    c_f: float = 10.0
    v_eps: float = 0.1

    def __post_init__(self):
        values = self.to_dict()
        if not all(math.isfinite(value) for value in values.values()):
            raise ConfigError('Feature hyperparameters must be finite', **values)
        if self.t_p <= 0 or self.t_f <= 0 or self.v_eps <= 0:
            raise ConfigError('t_p, t_f and v_eps must be positive', **values)
        if self.c < 0 or self.c_p < 0 or self.c_f < 0:
            raise ConfigError('c, c_p and c_f must be non-negative', **values)

    def to_dict(self):
        return {'c': self.c, 't_p': self.t_p, 't_f': self.t_f,
                'c_p': self.c_p, 'c_f': self.c_f, 'v_eps': self.v_eps}

    def as_array(self):
        return jnp.asarray([self.c, self.t_p, self.t_f, self.c_p, self.c_f, self.v_eps], dtype=float)

    def replace(self, **changes):
        values = self.to_dict()
        values.update(changes)
        return FeatureConfig(**values)

    @classmethod
    def from_mapping(cls, values):
        known = {key: float(values[key]) for key in cls().to_dict() if key in values}
        return cls(**known)


@dataclass(frozen=True)
class FeatureVector:
    """Feature values keyed by feature name, per step or summed"""
    names: tuple
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape[-1:] != (len(self.names),):
            raise InvalidValueError('Feature values do not match names', names=self.names, shape=values.shape)
        values.setflags(write=False)
        object.__setattr__(self, 'names', tuple(self.names))
        object.__setattr__(self, 'values', values)

    def __getitem__(self, name):
        return self.values[..., self.names.index(name)]

    def as_dict(self):
        return {name: float(self[name]) for name in self.names}


@dataclass(frozen=True)
class ThetaWeights:
    """Non-negative feature weights"""
    names: tuple
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.shape != (len(self.names),):
            raise InvalidValueError('Weights do not match feature names', names=self.names)
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise InvalidValueError('Weights must be finite and non-negative', theta=values)
        values.setflags(write=False)
        object.__setattr__(self, 'names', tuple(self.names))
        object.__setattr__(self, 'values', values)

    @property
    def variant(self):
        for name, names in VARIANTS.items():
            if names == self.names:
                return name
        return None

    def as_dict(self):
        return dict(zip(self.names, self.values.tolist()))

    def restricted(self, names):
        """Weights over ``names``; features missing here get weight 0"""
        mapping = self.as_dict()
        return ThetaWeights(names, [mapping.get(name, 0.0) for name in names])

    def normalized(self):
        total = float(self.values.sum())
        return self.values / total if total > 0 else self.values.copy()

    @classmethod
    def from_mapping(cls, mapping, names=None):
        names = tuple(names or [name for name in ALL_FEATURES if name in mapping])
        return cls(names, [float(mapping.get(name, 0.0)) for name in names])

    @classmethod
    def one_hot(cls, names, name):
        return cls(names, [1.0 if n == name else 0.0 for n in names])


@dataclass(frozen=True)
class NormalizationConstants:
    """Per-feature min and max of per-step values over a training set"""
    names: tuple
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        minimum = np.array(self.minimum, dtype=float)
        maximum = np.array(self.maximum, dtype=float)
        if minimum.shape != (len(self.names),) or maximum.shape != minimum.shape:
            raise InvalidValueError('Normalization constants do not match feature names', names=self.names)
        if not (np.all(np.isfinite(minimum)) and np.all(np.isfinite(maximum))):
            raise InvalidValueError('Normalization constants must be finite')
        if np.any(maximum < minimum):
            raise InvalidValueError('Normalization max must not be below min', names=self.names)
        minimum.setflags(write=False)
        maximum.setflags(write=False)
        object.__setattr__(self, 'names', tuple(self.names))
        object.__setattr__(self, 'minimum', minimum)
        object.__setattr__(self, 'maximum', maximum)

    @property
    def scale(self):
        """1 / (max - min), zero for degenerate ranges"""
        span = self.maximum - self.minimum
        return np.divide(1.0, span, out=np.zeros_like(span), where=span > 0)

    @property
    def columns(self):
        return tuple(ALL_FEATURES.index(name) for name in self.names)

    def restricted(self, names):
        index = [self.names.index(name) for name in names]
        return NormalizationConstants(names, self.minimum[index], self.maximum[index])

    def to_dict(self):
        return {'names': list(self.names), 'min': self.minimum.tolist(), 'max': self.maximum.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(tuple(data['names']), data['min'], data['max'])

    @classmethod
    def identity(cls, names):
        """min -1, max 0: normalized values are 1 + phi"""
        return cls(tuple(names), -np.ones(len(names)), np.zeros(len(names)))


def normalize(values, constants):
    """Min-max map of per-step feature values; degenerate ranges map to 0"""
    if isinstance(values, FeatureVector):
        mapped = (values.values - constants.minimum) * constants.scale
        return FeatureVector(values.names, mapped)
    values = np.asarray(values, dtype=float)
    return (values - constants.minimum) * constants.scale


def reward(features, theta):
    """Linear reward theta^T phi"""
    if isinstance(features, FeatureVector):
        phi = np.array([features[name] for name in theta.names])
    else:
        phi = np.asarray(features, dtype=float)
    return float(np.dot(theta.values, phi))


# ---------------------------------------------------------------------------
# Per-step kernels

def _wrap(a):
    return jnp.arctan2(jnp.sin(a), jnp.cos(a))


def _cross_distance(pos, point, direction):
    offset = pos - point
    return jnp.abs(direction[0] * offset[..., 1] - direction[1] * offset[..., 0])


def _h1(alpha, c):
    return jnp.where(jnp.abs(alpha) <= jnp.pi / 2, jnp.exp(-c * jnp.abs(alpha)), 0.0)


def _preceding_terms(pos, psi, v, others, present, z, cfg, weighted):
    """Sum over preceding cars; others (n, K, 2), present and z (n, K)"""
    c, t_p, c_p, v_eps = cfg[0], cfg[1], cfg[3], cfg[5]
    delta = others - pos[None]
    distance2 = jnp.sum(delta ** 2, axis=-1)
    # a coincident car is straight ahead; atan2 is singular there
    coincident = distance2 <= 1e-24
    delta = jnp.where(coincident[..., None], jnp.array([1.0, 0.0]), delta)
    alpha = jnp.where(coincident, 0.0, _wrap(jnp.arctan2(delta[..., 1], delta[..., 0]) - psi[None]))
    if weighted:
        distance2 = distance2 - c_p * z ** 2
    speed2 = jnp.maximum(v, v_eps)[None] ** 2
    terms = _h1(alpha, c) * jnp.exp(-distance2 / (t_p ** 2 * speed2))
    return -jnp.sum(jnp.where(present, terms, 0.0), axis=0)


def _following_term(d, w, pos, follower, speed, present, z, cfg, weighted):
    t_f, c_f, v_eps = cfg[2], cfg[4], cfg[5]
    distance2 = jnp.sum((follower - pos) ** 2, axis=-1)
    if weighted:
        distance2 = distance2 - c_f * z ** 2
    speed2 = jnp.maximum(speed, v_eps) ** 2
    term = (d ** 2 / w ** 2) * jnp.exp(-distance2 / (t_f ** 2 * speed2))
    return -jnp.where(present, term, 0.0)


class FeatureContext(NamedTuple):
    """Scenario surroundings as arrays; the ego plan is supplied separately"""
    dt: jnp.ndarray
    target_point: jnp.ndarray
    target_direction: jnp.ndarray
    w: jnp.ndarray
    v_d: jnp.ndarray
    preceding: jnp.ndarray          # (2, K, 2)
    preceding_present: jnp.ndarray  # (2, K)
    preceding_z: jnp.ndarray        # (2, K)
    follower: jnp.ndarray           # (K, 2)
    follower_speed: jnp.ndarray     # (K,)
    follower_present: jnp.ndarray   # (K,)
    follower_z: jnp.ndarray         # (K,)


def scenario_context(scenario, z=None):
    """Arrays of a scenario's surroundings; z=None means no unpredictability"""
    K = scenario.K
    zeros = np.zeros(K)
    preceding = [scenario.adjacent[role] for role in PRECEDING_ROLES]
    follower = scenario.adjacent[FOLLOWING_TARGET]
    return FeatureContext(
        dt=jnp.asarray(scenario.dt),
        target_point=jnp.asarray(scenario.lanes.target_line.point),
        target_direction=jnp.asarray(scenario.lanes.target_line.direction),
        w=jnp.asarray(scenario.lanes.w),
        v_d=jnp.asarray(scenario.v_d),
        preceding=jnp.asarray(np.stack([track.positions for track in preceding])),
        preceding_present=jnp.asarray(np.stack([track.present for track in preceding])),
        preceding_z=jnp.asarray(np.stack([z[role] if z is not None else zeros for role in PRECEDING_ROLES])),
        follower=jnp.asarray(follower.positions),
        follower_speed=jnp.asarray(follower.speeds),
        follower_present=jnp.asarray(follower.present),
        follower_z=jnp.asarray(z[FOLLOWING_TARGET] if z is not None else zeros),
    )


def _step_matrix(u, x0, ctx, cfg):
    """Raw per-step values of all seven features, shape (K, 7)"""
    states = rollout_jax(x0, u, ctx.dt)[:-1]
    controls = u.reshape(-1, 2)
    pos, psi = states[:, :2], states[:, 2]
    v, omega = controls[:, 0], controls[:, 1]

    d = _cross_distance(pos, ctx.target_point, ctx.target_direction)
    phi_d = -jnp.exp(d / ctx.w)
    phi_v = -(v - ctx.v_d) ** 2
    phi_a = -omega ** 2
    preceding = (pos, psi, v, ctx.preceding, ctx.preceding_present, ctx.preceding_z, cfg)
    phi_p = _preceding_terms(*preceding, weighted=False)
    phi_pz = _preceding_terms(*preceding, weighted=True)
    following = (d, ctx.w, pos, ctx.follower, ctx.follower_speed, ctx.follower_present, ctx.follower_z, cfg)
    phi_f = _following_term(*following, weighted=False)
    phi_fz = _following_term(*following, weighted=True)
    return jnp.stack([phi_d, phi_v, phi_a, phi_p, phi_f, phi_pz, phi_fz], axis=1)


def _normalized_sums(u, x0, ctx, cfg, minimum, scale, columns):
    steps = _step_matrix(u, x0, ctx, cfg)[:, list(columns)]
    return jnp.sum((steps - minimum) * scale, axis=0)


ALL_COLUMNS = tuple(range(len(ALL_FEATURES)))


def _padded(values, columns):
    full = np.zeros(len(ALL_FEATURES))
    full[list(columns)] = values
    return full


_step_matrix_jit = jax.jit(_step_matrix)
_sums_jit = partial(jax.jit, static_argnames='columns')(_normalized_sums)
_sums_jacobian = partial(jax.jit, static_argnames='columns')(jax.jacrev(_normalized_sums))
_sums_hessian = partial(jax.jit, static_argnames='columns')(jax.hessian(_normalized_sums))


@jax.jit
def _reward_and_gradient(u, x0, ctx, cfg, minimum, scale, theta):
    """Reward over all feature columns; theta, minimum and scale are zero-padded to them"""
    return jax.value_and_grad(lambda lifted: jnp.dot(theta, _normalized_sums(lifted, x0, ctx, cfg, minimum, scale,
                                                                             ALL_COLUMNS)))(u)


# ---------------------------------------------------------------------------
# Scalar per-step operations

def phi_d(state, lanes):
    """Lateral deviation from the target lane"""
    d = _cross_distance(jnp.asarray([state.x, state.y]), lanes.target_line.point, lanes.target_line.direction)
    return float(-jnp.exp(d / lanes.w))


def phi_v(control, v_d):
    """Deviation from the mean speed of traffic"""
    return -(control.v - v_d) ** 2


def phi_a(control):
    """Angular speed penalty"""
    return -control.omega ** 2


def _preceding_at(state, control, preceding, z, k, cfg, weighted):
    others = np.stack([track.positions[k] for track in preceding])[:, None, :]
    present = np.array([track.present[k] for track in preceding])[:, None]
    zk = np.array([z[track.role][k] if z is not None else 0.0 for track in preceding])[:, None]
    value = _preceding_terms(jnp.asarray([[state.x, state.y]]), jnp.asarray([state.psi]), jnp.asarray([control.v]),
                             jnp.asarray(others), jnp.asarray(present), jnp.asarray(zk), cfg.as_array(), weighted)
    return float(value[0])


def _following_at(state, following, z, k, lanes, cfg, weighted):
    pos = jnp.asarray([state.x, state.y])
    d = _cross_distance(pos, lanes.target_line.point, lanes.target_line.direction)
    zk = z[following.role][k] if z is not None else 0.0
    value = _following_term(d, lanes.w, pos, jnp.asarray(following.positions[k]), following.speeds[k],
                            bool(following.present[k]), zk, cfg.as_array(), weighted)
    return float(value)


def phi_p(state, control, preceding, k, cfg):
    """Soft time-to-collision with the preceding cars at step k"""
    return _preceding_at(state, control, preceding, None, k, cfg, weighted=False)


def phi_f(state, following, k, lanes, cfg):
    """Soft time-to-collision with the target-lane follower at step k"""
    return _following_at(state, following, None, k, lanes, cfg, weighted=False)


def phi_pz(state, control, preceding, z, k, cfg):
    """Unpredictability-weighted TTC with the preceding cars"""
    return _preceding_at(state, control, preceding, z, k, cfg, weighted=True)


def phi_fz(state, following, z, k, lanes, cfg):
    """Unpredictability-weighted TTC with the target-lane follower"""
    return _following_at(state, following, z, k, lanes, cfg, weighted=True)


# ---------------------------------------------------------------------------
# Trajectory level

def feature_steps(trajectory, scenario, z, cfg, variant='unpred'):
    """Raw per-step values (K, p) of a trajectory in a scenario"""
    names = variant_features(variant)
    matrix = _step_matrix_jit(jnp.asarray(trajectory.controls.reshape(-1)), jnp.asarray(trajectory.x0.as_array()),
                              scenario_context(scenario, z), cfg.as_array())
    columns = [ALL_FEATURES.index(name) for name in names]
    return FeatureVector(names, np.asarray(matrix)[:, columns])


def feature_sums(trajectory, scenario, z, cfg, variant='unpred'):
    """Per-feature sums over k = 0 .. K-1 (raw, before normalization)"""
    steps = feature_steps(trajectory, scenario, z, cfg, variant)
    return FeatureVector(steps.names, steps.values.sum(axis=0))


def normalization_from(scenarios, cfg, variant='unpred', z_series=None):
    """Per-step min and max over the expert trajectories of ``scenarios``"""
    names = variant_features(variant)
    if not scenarios:
        raise InvalidValueError('Normalization needs at least one scenario')
    stacked = []
    for index, scenario in enumerate(scenarios):
        z = z_series[index] if z_series is not None else None
        stacked.append(feature_steps(scenario.ego, scenario, z, cfg, variant).values)
    stacked = np.vstack(stacked)
    return NormalizationConstants(names, stacked.min(axis=0), stacked.max(axis=0))


class RewardFunction:
    """
    Normalized feature sums of one scenario as functions of the lifted
    control vector; the objects trajectory optimization and IRL share.
    """

    def __init__(self, scenario, cfg, normalization, z=None, x0=None):
        self.scenario = scenario
        self.names = normalization.names
        self.normalization = normalization
        self.cfg = cfg
        self.x0 = x0 if x0 is not None else scenario.ego.x0
        self._x0 = jnp.asarray(self.x0.as_array())
        self._ctx = scenario_context(scenario, z)
        self._cfg = cfg.as_array()
        self._minimum = jnp.asarray(normalization.minimum)
        self._scale = jnp.asarray(normalization.scale)
        self._columns = normalization.columns
        self._padded_minimum = jnp.asarray(_padded(normalization.minimum, self._columns))
        self._padded_scale = jnp.asarray(_padded(normalization.scale, self._columns))

    def sums(self, u):
        """Normalized feature sums (p,) at lifted controls u"""
        return np.asarray(_sums_jit(jnp.asarray(u), self._x0, self._ctx, self._cfg, self._minimum, self._scale,
                                    columns=self._columns))

    def jacobian(self, u):
        """d(normalized sums)/du, shape (p, 2K)"""
        return np.asarray(_sums_jacobian(jnp.asarray(u), self._x0, self._ctx, self._cfg, self._minimum, self._scale,
                                         columns=self._columns))

    def hessian(self, u):
        """Second derivatives of each normalized sum, shape (p, 2K, 2K)"""
        return np.asarray(_sums_hessian(jnp.asarray(u), self._x0, self._ctx, self._cfg, self._minimum, self._scale,
                                        columns=self._columns))

    def value_and_gradient(self, u, theta):
        """theta^T (normalized sums) and its gradient with respect to u"""
        theta = self._aligned(theta)
        value, gradient = _reward_and_gradient(jnp.asarray(u), self._x0, self._ctx, self._cfg, self._padded_minimum,
                                               self._padded_scale, jnp.asarray(_padded(theta.values, self._columns)))
        return float(value), np.asarray(gradient)

    def steps(self, u):
        """Raw per-step values (K, p) at lifted controls u"""
        matrix = np.asarray(_step_matrix_jit(jnp.asarray(u), self._x0, self._ctx, self._cfg))
        return matrix[:, list(self._columns)]

    def first_non_finite(self, u):
        """(feature, step) of the first non-finite per-step value, or None"""
        bad = np.argwhere(~np.isfinite(self.steps(u)))
        if bad.size == 0:
            return None
        step, column = bad[0]
        return self.names[column], int(step)

    def _aligned(self, theta):
        if theta.names != self.names:
            if not set(theta.names) <= set(self.names):
                raise ConfigError('Weights name features the model does not have',
                                  theta=list(theta.names), features=list(self.names))
            theta = theta.restricted(self.names)
        return theta


# ---------------------------------------------------------------------------
# Model artifact

@dataclass(frozen=True)
class ModelArtifact:
    """Everything generation needs from training"""
    variant: str
    theta: ThetaWeights
    cfg: FeatureConfig
    normalization: NormalizationConstants
    t_n: int = 2
    predictor: str = 'cv'
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            'format': MODEL_FORMAT,
            'variant': self.variant,
            'theta': self.theta.as_dict(),
            'feature_config': self.cfg.to_dict(),
            'normalization': self.normalization.to_dict(),
            't_n': self.t_n,
            'predictor': self.predictor,
            'metadata': dict(self.metadata),
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1) + '\n')
        return path

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ParseError(f'Model file not found: {path}', path=str(path))
        except json.JSONDecodeError as e:
            raise ParseError(f'Invalid model file {path}: {e}', path=str(path), row=e.lineno)
        if data.get('format') != MODEL_FORMAT:
            raise ParseError(f'Not a model file (format {data.get("format")!r})', path=str(path), field='format')
        try:
            names = variant_features(data['variant'])
            return cls(
                variant=data['variant'],
                theta=ThetaWeights.from_mapping(data['theta'], names),
                cfg=FeatureConfig.from_mapping(data['feature_config']),
                normalization=NormalizationConstants.from_dict(data['normalization']),
                t_n=int(data.get('t_n', 2)),
                predictor=data.get('predictor', 'cv'),
                metadata=data.get('metadata', {}),
            )
        except KeyError as e:
            raise ParseError(f'Missing model field {e.args[0]!r}', path=str(path), field=e.args[0])
