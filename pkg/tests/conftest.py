import math

import numpy as np
import pytest

from lanechange import create_app, db
from lanechange.config import TestConfig
from lanechange.features import ALL_FEATURES, FeatureConfig, NormalizationConstants
from lanechange.scenario import State, Trajectory
from lanechange.synth import SceneSpec, make_scene


@pytest.fixture
def app():
    """Create and configure a test app instance"""
    app = create_app(TestConfig)
    yield app
    with app.app_context():
        db.session.remove()
        db.drop_all()


@pytest.fixture
def runner(app):
    return app.test_cli_runner()


@pytest.fixture
def cfg():
    return FeatureConfig()


@pytest.fixture
def identity_norm():
    """Constants that map each per-step value phi to 1 + phi"""
    return NormalizationConstants.identity(ALL_FEATURES)


@pytest.fixture
def small_spec():
    return SceneSpec(K=10, jitter=0.0)


@pytest.fixture
def scene(small_spec):
    return make_scene(small_spec, seed=0)


@pytest.fixture
def straight():
    """Ten steps straight up the origin lane at 20 m/s"""
    controls = np.column_stack([np.full(10, 20.0), np.zeros(10)])
    return Trajectory.from_controls(State(0.0, 0.0, math.pi / 2), controls, 0.1)
