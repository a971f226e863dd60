"""
Kinematic unicycle discretized with forward Euler:

    x_{k+1}   = x_k + dt * v_k * cos(psi_k)
    y_{k+1}   = y_k + dt * v_k * sin(psi_k)
    psi_{k+1} = psi_k + dt * omega_k

Public rollouts wrap the heading after every step. The jax rollout used
for derivatives keeps the heading unwrapped so sensitivities stay smooth.
"""
import math

import jax
import jax.numpy as jnp
import numpy as np

from lanechange.errors import InvalidValueError
from lanechange.scenario import Control, State, wrap_angle


def step(x, u, dt):
    """Advance one Euler step"""
    if not (math.isfinite(dt) and dt > 0):
        raise InvalidValueError('Time step must be positive and finite', dt=dt)
    values = (x.x, x.y, x.psi, u.v, u.omega)
    if not all(math.isfinite(value) for value in values):
        raise InvalidValueError('Non-finite state or control', values=values)
    return State(x.x + dt * u.v * math.cos(x.psi),
                 x.y + dt * u.v * math.sin(x.psi),
                 wrap_angle(x.psi + dt * u.omega))


def _as_controls(controls):
    if isinstance(controls, np.ndarray):
        return [Control(float(v), float(omega)) for v, omega in controls]
    return list(controls)


def rollout(x0, controls, dt):
    """Roll controls out from x0; returns the K states reached"""
    controls = _as_controls(controls)
    if not controls:
        raise InvalidValueError('Rollout needs at least one control')
    states = []
    state = x0
    for k, u in enumerate(controls):
        try:
            state = step(state, u, dt)
        except InvalidValueError as e:
            raise InvalidValueError(f'Rollout failed at step {k}: {e.message}', step=k, **e.details)
        states.append(state)
    return states


def rollout_array(x0, controls, dt):
    """Array form of :func:`rollout`: (K, 2) controls -> (K, 3) states"""
    x0 = np.asarray(x0, dtype=float)
    controls = np.asarray(controls, dtype=float)
    if controls.ndim != 2 or controls.shape[0] < 1:
        raise InvalidValueError('Rollout needs at least one control', shape=controls.shape)
    if not (np.all(np.isfinite(controls)) and np.all(np.isfinite(x0))):
        bad = np.flatnonzero(~np.all(np.isfinite(controls), axis=1))
        raise InvalidValueError('Non-finite state or control', step=int(bad[0]) if bad.size else 0)
    states = np.empty((controls.shape[0], 3))
    x, y, psi = x0
    for k, (v, omega) in enumerate(controls):
        x, y, psi = (x + dt * v * math.cos(psi),
                     y + dt * v * math.sin(psi),
                     wrap_angle(psi + dt * omega))
        states[k] = (x, y, psi)
    return states


def rollout_jax(x0, u, dt):
    """
    Differentiable rollout of the lifted control vector ``u`` (2K,).

    Returns the (K+1, 3) states x_0 .. x_K with unwrapped heading.
    """
    controls = u.reshape(-1, 2)
    v, omega = controls[:, 0], controls[:, 1]
    psi = x0[2] + dt * jnp.concatenate([jnp.zeros(1), jnp.cumsum(omega)])
    dx = dt * v * jnp.cos(psi[:-1])
    dy = dt * v * jnp.sin(psi[:-1])
    x = x0[0] + jnp.concatenate([jnp.zeros(1), jnp.cumsum(dx)])
    y = x0[1] + jnp.concatenate([jnp.zeros(1), jnp.cumsum(dy)])
    return jnp.stack([x, y, psi], axis=1)


@jax.jit
def _sensitivity(x0, u, dt):
    return jax.jacfwd(lambda lifted: rollout_jax(x0, lifted, dt)[1:].reshape(-1))(u)


def rollout_sensitivity(x0, controls, dt):
    """
    Jacobian of the lifted states (x_1 .. x_K, 3K) with respect to the
    lifted controls (u_0 .. u_{K-1}, 2K).
    """
    controls = np.asarray([u.as_array() for u in controls] if not isinstance(controls, np.ndarray) else controls,
                          dtype=float)
    # Validates inputs and reports the offending step
    rollout_array(x0.as_array(), controls, dt)
    return np.asarray(_sensitivity(jnp.asarray(x0.as_array()), jnp.asarray(controls.reshape(-1)), dt))


def check_trajectory(trajectory, tol=1e-9):
    """Raise unless the trajectory's states are the rollout of its controls"""
    expected = rollout_array(trajectory.x0.as_array(), trajectory.controls, trajectory.dt)
    position_error = np.max(np.abs(expected[:, :2] - trajectory.states[:, :2]))
    heading_error = max(abs(wrap_angle(a - b)) for a, b in zip(expected[:, 2], trajectory.states[:, 2]))
    if position_error > tol or heading_error > tol:
        raise InvalidValueError('Trajectory states do not match the rollout of its controls',
                                position_error=float(position_error), heading_error=float(heading_error))
