"""Oracles shared by the test modules"""
import math

import numpy as np

from lanechange.scenario import State, Trajectory
from lanechange.synth import SceneSpec, make_scene


def central_difference(func, x, h=1e-6):
    """Jacobian of ``func`` at ``x`` by central differences, shape f.shape + x.shape"""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(func(x), dtype=float)
    jacobian = np.empty(f0.shape + x.shape)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        jacobian[..., i] = (np.asarray(func(x + e)) - np.asarray(func(x - e))) / (2.0 * h)
    return jacobian


def random_controls(rng, K, speed=25.0):
    return np.column_stack([speed + rng.normal(0.0, 1.0, K), rng.normal(0.0, 0.05, K)])


def random_scene(seed, K=10, **spec):
    """A scripted scene whose ego follows random controls from the origin, heading +y"""
    rng = np.random.default_rng(seed + 1000)
    scene = make_scene(SceneSpec(K=K, **spec), seed)
    ego = Trajectory.from_controls(State(0.0, 0.0, math.pi / 2), random_controls(rng, K), scene.dt)
    return scene.with_ego(ego)


def naive_rollout(x0, controls, dt):
    """Scalar loop without wrapping, for comparison with the library rollouts"""
    x, y, psi = x0
    states = []
    for v, omega in controls:
        x, y, psi = x + dt * v * math.cos(psi), y + dt * v * math.sin(psi), psi + dt * omega
        states.append((x, y, psi))
    return np.array(states)
