#
# Licensed to the Apache Software Foundation (ASF) under one
# or more contributor license agreements.  See the NOTICE file
# distributed with this work for additional information
# regarding copyright ownership.  The ASF licenses this file
# to you under the Apache License, Version 2.0 (the
# "License"); you may not use this file except in compliance
# with the License.  You may obtain a copy of the License at
#
#   http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing,
# software distributed under the License is distributed on an
# "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
# KIND, either express or implied.  See the License for the
# specific language governing permissions and limitations
# under the License.
#

import pytest

from proxy_kd.constants import RunMode
from proxy_kd.pipeline import ExperimentConfig, InvalidConfigError, describe_knobs, \
    parse_override, parse_overrides
from proxy_kd.pipeline.knob import CategoricalKnob, FloatKnob, IntegerKnob, ListKnob


class TestKnobs:
    """Test knob validation."""

    def test_integer_rejects_bool_and_range(self):
        knob = IntegerKnob(1, 0, 10)
        assert knob.validate('n', 3) == 3
        with pytest.raises(InvalidConfigError, match='should be a `int`'):
            knob.validate('n', True)
        with pytest.raises(InvalidConfigError, match=r'\[0, 10\]'):
            knob.validate('n', 11)

    def test_float_exclusive_min(self):
        knob = FloatKnob(0.5, 0.0, 1.0, exclusive_min=True)
        assert knob.validate('f', 1) == 1.0
        with pytest.raises(InvalidConfigError, match=r'\(0.0, 1.0\]'):
            knob.validate('f', 0.0)

    def test_categorical(self):
        with pytest.raises(InvalidConfigError, match='should be one of'):
            CategoricalKnob('a', ['a', 'b']).validate('c', 'z')

    def test_list_items_length_and_uniqueness(self):
        knob = ListKnob([1], IntegerKnob(0, 0, 5), length=2, unique=True)
        assert knob.validate('xs', (1, 2)) == [1, 2]
        with pytest.raises(InvalidConfigError, match=r'xs\[1\]'):
            knob.validate('xs', [1, 9])
        with pytest.raises(InvalidConfigError, match='2 items'):
            knob.validate('xs', [1])
        with pytest.raises(InvalidConfigError, match='repeat'):
            knob.validate('xs', [3, 3])


class TestExperimentConfig:
    """Test the flat experiment config."""

    def test_defaults(self):
        """Unset keys take their documented defaults."""
        config = ExperimentConfig()
        assert (config.k, config.alpha, config.top_k) == (16, 100.0, 10)
        assert config.fractions == [0.10, 0.45, 0.45]
        assert config.modes == [RunMode.PROXY_KD]

    def test_aliases(self):
        """K, steps and mode map onto their canonical keys."""
        config = ExperimentConfig({'K': 5, 'steps': 7, 'mode': RunMode.VANILLA_BLACKBOX})
        assert (config.top_k, config.student_steps) == (5, 7)
        assert config.modes == [RunMode.VANILLA_BLACKBOX]

    def test_unknown_key(self):
        with pytest.raises(InvalidConfigError, match='Unknown config key `lr_decay`'):
            ExperimentConfig({'lr_decay': 0.5})

    def test_nested_table(self):
        with pytest.raises(InvalidConfigError, match='flat'):
            ExperimentConfig({'alpha': {'value': 1.0}})

    def test_cross_key_checks(self):
        """Checks spanning several keys run after the per-key ones."""
        with pytest.raises(InvalidConfigError, match='min_len'):
            ExperimentConfig({'min_len': 6, 'max_len': 5})
        with pytest.raises(InvalidConfigError, match='sum to 1'):
            ExperimentConfig({'fractions': [0.2, 0.2, 0.2]})
        with pytest.raises(InvalidConfigError, match='divisible'):
            ExperimentConfig({'student_d_model': 30})
        with pytest.raises(InvalidConfigError, match='teacher = "transformer"'):
            ExperimentConfig({'white_box_source': 'teacher'})
        with pytest.raises(InvalidConfigError, match='too short'):
            ExperimentConfig({'task': 'copy', 'max_len': 12, 'max_seq_len': 20})
        with pytest.raises(InvalidConfigError, match='top_k'):
            ExperimentConfig({'top_k': 1000})

    def test_hash_is_canonical(self):
        """Equal settings hash equally whatever the key order."""
        a = ExperimentConfig({'alpha': 2.0, 'k': 3})
        b = ExperimentConfig({'k': 3, 'alpha': 2})
        assert a == b
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != ExperimentConfig({'k': 4}).config_hash()

    def test_with_overrides(self):
        base = ExperimentConfig({'k': 3})
        changed = base.with_overrides({'beta': 0.5})
        assert (changed.k, changed.beta) == (3, 0.5)
        assert base.beta == 0.1

    def test_model_config(self):
        config = ExperimentConfig({'proxy_d_model': 64, 'proxy_layers': 3})
        model = config.model_config('proxy')
        assert (model.d_model, model.d_ff, model.n_layers) == (64, 256, 3)

    def test_from_toml(self, tmp_path):
        """TOML files load with command-line overrides on top."""
        path = tmp_path / 'exp.toml'
        path.write_text('task = "reverse"\nk = 2\nseeds = [4]\n')
        config = ExperimentConfig.from_toml(str(path), {'k': 3})
        assert (config.task, config.k, config.seeds) == ('reverse', 3, [4])

    def test_invalid_toml(self, tmp_path):
        path = tmp_path / 'bad.toml'
        path.write_text('task = \n')
        with pytest.raises(InvalidConfigError, match='Invalid TOML'):
            ExperimentConfig.from_toml(str(path))


class TestOverrides:
    """Test --set parsing."""

    def test_typed_values(self):
        assert parse_override('k=4') == {'k': 4}
        assert parse_override('alpha = 0.5') == {'alpha': 0.5}
        assert parse_override('seeds=[1, 2]') == {'seeds': [1, 2]}
        assert parse_override('progress=true') == {'progress': True}

    def test_bare_strings(self):
        assert parse_override('task=copy') == {'task': 'copy'}

    def test_missing_equals(self):
        with pytest.raises(InvalidConfigError, match='key=value'):
            parse_override('k')

    def test_later_wins(self):
        assert parse_overrides(['k=1', 'k=2']) == {'k': 2}


def test_describe_knobs_lists_every_key():
    text = describe_knobs()
    assert 'top_k' in text and 'published default' in text
