import json

import numpy as np
import pytest

from lanechange import config as settings_module
from lanechange import create_app
from lanechange.config import merge_config_file, setting
from lanechange.errors import (ConfigError, InvalidValueError, LaneChangeError, NonFiniteError, ParseError,
                               TraceGapError)


class TestConfigFile:
    def test_sections_are_merged(self, tmp_path):
        path = tmp_path / 'experiment.toml'
        path.write_text('[features]\nc_p = 4.0\n\n[train]\nvariant = "baseline"\n')
        config = {'FEATURES': {'c': 1.0, 'c_p': 10.0}, 'TRAIN': {'variant': 'unpred', 'seed': 0}}
        merge_config_file(config, path)
        assert config['FEATURES'] == {'c': 1.0, 'c_p': 4.0}
        assert config['TRAIN'] == {'variant': 'baseline', 'seed': 0}

    def test_unknown_section(self, tmp_path):
        path = tmp_path / 'experiment.toml'
        path.write_text('[scraper]\ninterval = 5\n')
        with pytest.raises(ConfigError) as excinfo:
            merge_config_file({}, path)
        assert excinfo.value.details['section'] == 'scraper'

    def test_invalid_toml(self, tmp_path):
        path = tmp_path / 'experiment.toml'
        path.write_text('[features\n')
        with pytest.raises(ConfigError):
            merge_config_file({}, path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            merge_config_file({}, tmp_path / 'missing.toml')

    def test_app_reads_config_file(self, tmp_path):
        path = tmp_path / 'experiment.toml'
        path.write_text('[optimizer]\nmax_iter = 25\n')
        app = create_app(settings_module.TestConfig, config_file=path)
        assert app.config['OPTIMIZER']['max_iter'] == 25
        assert app.config['OPTIMIZER']['grad_tol'] == 1e-6


class TestSetting:
    def test_flag_wins(self):
        config = {'TRAIN': {'seed': 3}}
        assert setting(config, 'TRAIN', 'seed', 7) == 7
        assert setting(config, 'TRAIN', 'seed') == 3

    def test_zero_flag_is_a_value(self):
        assert setting({'TRAIN': {'seed': 3}}, 'TRAIN', 'seed', 0) == 0

    def test_missing(self):
        with pytest.raises(ConfigError):
            setting({}, 'TRAIN', 'seed')

    def test_defaults_cover_every_section(self):
        for section in settings_module.SECTIONS:
            assert isinstance(getattr(settings_module.Config, section), dict)


class TestErrors:
    def test_exit_codes(self):
        assert ParseError('bad').exit_code == 2
        assert TraceGapError('gap').exit_code == 2
        assert NonFiniteError('nan').exit_code == 3
        assert issubclass(InvalidValueError, LaneChangeError)

    def test_summary_is_json(self):
        error = NonFiniteError('Non-finite reward', feature='pz', step=np.int64(4), theta=np.array([1.0, 2.0]),
                               K=(3, 4))
        summary = json.loads(json.dumps(error.to_dict()))
        assert summary == {'error': 'NonFiniteError', 'message': 'Non-finite reward',
                           'details': {'feature': 'pz', 'step': 4, 'theta': [1.0, 2.0], 'K': [3, 4]}}
