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

import hashlib
import json
import logging
from collections import OrderedDict
from typing import Any, Dict, Iterable, Optional

import tomli

from proxy_kd.constants import RunMode, TaskName, TeacherBackend
from proxy_kd.corpus import DEFAULT_VOCAB, TaskSpec
from proxy_kd.losses import KLReduction
from proxy_kd.model import ModelConfig
from .knob import PUBLISHED_DEFAULT, BaseKnob, BooleanKnob, CategoricalKnob, FloatKnob, \
    IntegerKnob, InvalidConfigError, ListKnob

logger = logging.getLogger(__name__)

BIG = 10**9


class WhiteBoxSource():
    AUTO = 'auto'
    TEACHER = 'teacher'
    PROXY = 'proxy'

    ALL = [AUTO, TEACHER, PROXY]


class Precision():
    FLOAT32 = 'float32'
    FLOAT64 = 'float64'

    ALL = [FLOAT32, FLOAT64]


KNOBS: Dict[str, BaseKnob] = OrderedDict([
    # Data
    ('task', CategoricalKnob(TaskName.MODADD, TaskName.ALL, help='synthetic task')),
    ('modulus', IntegerKnob(97, 2, 10**6, help='modadd modulus')),
    ('min_len', IntegerKnob(4, 1, 12, help='shortest payload for copy/reverse/sortdigits')),
    ('max_len', IntegerKnob(8, 1, 12, help='longest payload for copy/reverse/sortdigits')),
    ('n_examples', IntegerKnob(2000, 3, BIG, help='corpus size before the split')),
    ('n_test', IntegerKnob(200, 1, BIG, help='held-out test prompts')),
    ('fractions', ListKnob([0.10, 0.45, 0.45], FloatKnob(0.1, 0.0, 1.0, exclusive_min=True),
                           length=3, help='d_w / d_p / d_s split fractions',
                           provenance=PUBLISHED_DEFAULT)),
    ('seeds', ListKnob([0, 1, 2], IntegerKnob(0, 0, 2**31 - 1), unique=True,
                       help='one full replicate per seed')),
    ('split_seed', IntegerKnob(0, 0, 2**31 - 1, help='corpus shuffle seed')),
    # Teacher
    ('teacher', CategoricalKnob(TeacherBackend.PROGRAMMATIC, TeacherBackend.ALL,
                                help='black-box teacher backend')),
    ('teacher_noise', FloatKnob(0.0, 0.0, 1.0, help='programmatic teacher label-noise rate')),
    ('teacher_temperature', FloatKnob(0.0, 0.0, 10.0,
                                      help='transformer teacher sampling temperature')),
    ('teacher_train_size', IntegerKnob(4000, 1, BIG, help='transformer teacher training prompts')),
    ('teacher_steps', IntegerKnob(3000, 0, BIG, help='transformer teacher training steps')),
    ('teacher_min_accuracy', FloatKnob(0.95, 0.0, 1.0,
                                       help='test accuracy a transformer teacher must reach')),
    # Models
    ('max_seq_len', IntegerKnob(32, 2, 4096, help='context length of every model')),
    ('n_heads', IntegerKnob(4, 1, 64, help='attention heads of every model')),
    ('student_layers', IntegerKnob(2, 1, 64, help='student depth')),
    ('student_d_model', IntegerKnob(128, 1, 8192, help='student width')),
    ('proxy_layers', IntegerKnob(4, 1, 64, help='proxy depth')),
    ('proxy_d_model', IntegerKnob(256, 1, 8192, help='proxy width')),
    ('teacher_layers', IntegerKnob(6, 1, 64, help='transformer teacher depth')),
    ('teacher_d_model', IntegerKnob(384, 1, 8192, help='transformer teacher width')),
    # Optimization
    ('lr', FloatKnob(3e-4, 0.0, 1.0, exclusive_min=True,
                     help='Adam learning rate (1e-5 in the large-model setting)')),
    ('batch_size', IntegerKnob(16, 1, 4096, help='examples per step')),
    ('warmup_epochs', IntegerKnob(1, 0, 10000, help='proxy SFT epochs over d_w')),
    # Alignment
    ('k', IntegerKnob(16, 0, 10000, help='proxy alignment iterations',
                      provenance=PUBLISHED_DEFAULT)),
    ('beta', FloatKnob(0.1, 0.0, 1000.0, exclusive_min=True,
                       help='preference loss inverse temperature')),
    ('pairs_per_prompt', IntegerKnob(1, 1, 64, help='preference pairs per prompt per iteration')),
    ('sample_temperature', FloatKnob(1.0, 0.0, 10.0, help='temperature for proxy samples')),
    ('convergence_eps', FloatKnob(1e-3, 0.0, 1.0,
                                  help='moving-average preference loss delta that stops '
                                  'alignment (0 disables)')),
    ('convergence_window', IntegerKnob(200, 1, BIG, help='moving-average window in steps')),
    # Distillation
    ('alpha', FloatKnob(100.0, 0.0, 1e6, help='weighted KL strength',
                        provenance=PUBLISHED_DEFAULT)),
    ('top_k', IntegerKnob(10, 1, 10**6, help='logits kept per cached position',
                          provenance=PUBLISHED_DEFAULT)),
    ('kl_reduction', CategoricalKnob(KLReduction.TOKEN_MEAN, KLReduction.ALL,
                                     help='KL reduction over response positions')),
    ('weight_loglik', CategoricalKnob(KLReduction.SEQUENCE_SUM, KLReduction.ALL,
                                      help='proxy log-likelihood used for sample weights')),
    ('student_steps', IntegerKnob(2000, 0, BIG, help='student training steps')),
    ('eval_every', IntegerKnob(200, 1, BIG, help='steps between accuracy evaluations')),
    ('modes', ListKnob([RunMode.PROXY_KD], CategoricalKnob(RunMode.PROXY_KD, RunMode.ALL),
                       unique=True, help='run modes; all six form the ablation suite')),
    ('white_box_source', CategoricalKnob(WhiteBoxSource.AUTO, WhiteBoxSource.ALL,
                                         help='white_box_fkl soft labels: transformer teacher '
                                         'if present (auto), or the aligned proxy')),
    ('coverage_k', ListKnob([1, 2, 5, 10, 20], IntegerKnob(1, 1, 10**6), unique=True,
                            help='K values for the top-K coverage diagnostic')),
    # Process
    ('threads', IntegerKnob(1, 1, 256, help='worker threads for per-example work')),
    ('precision', CategoricalKnob(Precision.FLOAT32, Precision.ALL, help='float width')),
    ('progress', BooleanKnob(False, help='show progress bars')),
])

# Accepted spellings mapped onto canonical keys
ALIASES = {'K': 'top_k', 'steps': 'student_steps', 'mode': 'modes'}


def _canonical(key: str, value: Any):
    if key == 'mode':
        return ('modes', [value] if isinstance(value, str) else value)
    return (ALIASES.get(key, key), value)


class ExperimentConfig():
    '''
    Validated, flat experiment settings. Every key is declared once in ``KNOBS``.
    '''

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        merged = {name: knob.default for (name, knob) in KNOBS.items()}
        for (key, value) in (values or {}).items():
            (key, value) = _canonical(key, value)
            if key not in KNOBS:
                raise InvalidConfigError('Unknown config key `{}`'.format(key))
            if isinstance(value, dict):
                raise InvalidConfigError(
                    'Config should be flat, but `{}` is a table'.format(key))
            merged[key] = KNOBS[key].validate(key, value)
        self._values = merged
        self._validate()

    @classmethod
    def from_toml(cls, path: str, overrides: Optional[Dict[str, Any]] = None):
        try:
            with open(path, 'rb') as f:
                values = tomli.load(f)
        except tomli.TOMLDecodeError as e:
            raise InvalidConfigError('Invalid TOML in "{}": {}'.format(path, e))
        values.update(overrides or {})
        return cls(values)

    def with_overrides(self, overrides: Dict[str, Any]) -> 'ExperimentConfig':
        return ExperimentConfig({**self._values, **overrides})

    def __getattr__(self, name):
        values = self.__dict__.get('_values', {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    def __getitem__(self, name):
        return self._values[name]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self._values == other._values

    def to_jsonable(self) -> Dict[str, Any]:
        return dict(self._values)

    def config_hash(self) -> str:
        canonical = json.dumps(self._values, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def task_spec(self) -> TaskSpec:
        return TaskSpec(self.task, self.modulus, self.min_len, self.max_len)

    @property
    def proxy_size(self) -> str:
        '''
        Proxy depth and width as ``<layers>x<d_model>``, carried by run ids and report rows.
        '''
        return '{}x{}'.format(self.proxy_layers, self.proxy_d_model)

    def model_config(self, role: str) -> ModelConfig:
        d_model = self._values['{}_d_model'.format(role)]
        return ModelConfig(vocab_size=len(DEFAULT_VOCAB),
                           max_seq_len=self.max_seq_len,
                           n_layers=self._values['{}_layers'.format(role)],
                           n_heads=self.n_heads,
                           d_model=d_model,
                           d_ff=4 * d_model)

    def _validate(self):
        v = self._values
        if v['min_len'] > v['max_len']:
            raise InvalidConfigError('`min_len` ({}) should not exceed `max_len` ({})'.format(
                v['min_len'], v['max_len']))
        if abs(sum(v['fractions']) - 1.0) > 1e-9:
            raise InvalidConfigError('`fractions` should sum to 1, got {}'.format(
                v['fractions']))
        if v['coverage_k'] != sorted(v['coverage_k']):
            raise InvalidConfigError('`coverage_k` should be ascending')
        if v['top_k'] > len(DEFAULT_VOCAB):
            raise InvalidConfigError('`top_k` ({}) should not exceed the vocabulary size {}'.format(
                v['top_k'], len(DEFAULT_VOCAB)))
        for role in ('student', 'proxy', 'teacher'):
            d_model = v['{}_d_model'.format(role)]
            if d_model % v['n_heads'] != 0:
                raise InvalidConfigError(
                    '`{}_d_model` ({}) should be divisible by `n_heads` ({})'.format(
                        role, d_model, v['n_heads']))
        if v['white_box_source'] == WhiteBoxSource.TEACHER and \
                v['teacher'] != TeacherBackend.TRANSFORMER:
            raise InvalidConfigError(
                '`white_box_source = "teacher"` needs `teacher = "transformer"`')
        spec = self.task_spec()
        needed = spec.max_prompt_len() + spec.max_response_len()
        if needed > v['max_seq_len']:
            raise InvalidConfigError(
                '`max_seq_len` ({}) is too short for {} prompts plus responses ({})'.format(
                    v['max_seq_len'], spec.name, needed))


def parse_override(text: str) -> Dict[str, Any]:
    '''
    Parses ``key=value``; the value is read as a TOML value, falling back to a bare string.
    '''
    if '=' not in text:
        raise InvalidConfigError('Override "{}" should read key=value'.format(text))
    (key, raw) = text.split('=', 1)
    key = key.strip()
    try:
        value = tomli.loads('v = {}'.format(raw.strip()))['v']
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return {key: value}


def parse_overrides(texts: Iterable[str]) -> Dict[str, Any]:
    overrides = {}
    for text in texts or []:
        overrides.update(parse_override(text))
    return overrides


def describe_knobs() -> str:
    lines = ['config keys (flat TOML; override with --set key=value):']
    for (name, knob) in KNOBS.items():
        lines.append('  {:<22} {}'.format(name, knob.describe()))
    return '\n'.join(lines)
