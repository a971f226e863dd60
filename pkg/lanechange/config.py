import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from dotenv import load_dotenv

from lanechange.errors import ConfigError

load_dotenv()

# Sections a config file may override, one per command plus shared ones
SECTIONS = ('INGEST', 'PREDICT', 'TRAIN', 'GENERATE', 'EVAL', 'SYNTH', 'PLOT',
            'FEATURES', 'OPTIMIZER', 'IRL')


class Config:
    """Base configuration class"""
    SQLALCHEMY_DATABASE_URI = os.environ.get('DATABASE_URL') or 'sqlite:///lanechange_runs.db'
    SQLALCHEMY_TRACK_MODIFICATIONS = False

    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO')

    # Default path of the experiment config file (TOML); flags win over it
    CONFIG_FILE = os.environ.get('LANECHANGE_CONFIG')

    # Sampling time and window, 10 Hz over [t_lc - 2.0, t_lc + 5.0]
    DT = 0.1
    HORIZON = 70

    FEATURES = {
        'c': 1.0,
        't_p': 2.0,
        't_f': 2.0,
        'c_p': 10.0,
        'c_f': 10.0,
        'v_eps': 0.1,
    }

    OPTIMIZER = {
        'max_iter': 500,
        'grad_tol': 1e-6,
        'step_tol': 1e-12,
        'restarts': 0,
        'restart_noise': 0.05,
        'v_max': 60.0,
        'omega_max': 1.0,
    }

    IRL = {
        'max_iter': 200,
        'grad_tol': 1e-6,
        'theta_max': 1000.0,
        'lambda_ladder': [0.0, 1e-8, 1e-6, 1e-4, 1e-2, 1.0],
    }

    INGEST = {
        'schema': 'ngsim',
        # None uses the schema's own units
        'units': None,
        'vicinity': 100.0,
        'smoothing_window': 0.5,
        'history': 5,
        'jobs': 1,
    }

    PREDICT = {
        'predictor': 'cv',
        't_n': 2,
        'horizon': 2,
        'strict_traces': True,
    }

    TRAIN = {
        'variant': 'unpred',
        'seed': 0,
        'jobs': 1,
    }

    GENERATE = {
        'seed': 0,
        'restarts': 0,
        'jobs': 1,
    }

    EVAL = {
        'jobs': 1,
    }

    SYNTH = {
        'n': 10,
        'seed': 0,
        'noise': 0.0,
        'fixture_format': 'ngsim',
        'jobs': 1,
    }

    PLOT = {
        'time': 3.0,
    }


class TestConfig(Config):
    """Configuration used by the test-suite"""
    TESTING = True
    SQLALCHEMY_DATABASE_URI = 'sqlite://'
    CONFIG_FILE = None


def merge_config_file(config, path):
    """Merge a TOML experiment file into ``config`` section by section"""
    try:
        with open(path, 'rb') as handle:
            data = tomllib.load(handle)
    except FileNotFoundError:
        raise ConfigError(f'Config file not found: {path}', path=str(path))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f'Config file is not valid TOML: {e}', path=str(path))

    for section, values in data.items():
        key = section.upper()
        if key not in SECTIONS:
            raise ConfigError(f'Unknown config section [{section}]', path=str(path), section=section)
        if not isinstance(values, dict):
            raise ConfigError(f'Config section [{section}] must be a table', path=str(path), section=section)
        merged = dict(config.get(key, {}))
        merged.update(values)
        config[key] = merged


def setting(config, section, key, flag=None):
    """Resolve one setting: flag > config file > defaults"""
    if flag is not None:
        return flag
    values = config.get(section, {})
    if key not in values:
        raise ConfigError(f'Missing setting {section}.{key}', section=section, key=key)
    return values[key]
