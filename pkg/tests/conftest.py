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

import os

import pytest

from proxy_kd.autodiff import tensor
from proxy_kd.constants import ModelRole
from proxy_kd.corpus import DEFAULT_VOCAB, Example, TaskSpec, encode_prompt, encode_response
from proxy_kd.model import LanguageModel, ModelConfig

RUN_SLOW = os.environ.get('PROXY_KD_RUN_SLOW', '0') == '1'


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip_slow = pytest.mark.skip(reason='set PROXY_KD_RUN_SLOW=1 to run')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def float64():
    '''64-bit test mode for gradient and oracle tests; restores the previous mode.'''
    previous = tensor.is_test_mode()
    tensor.set_test_mode(True)
    yield
    tensor.set_test_mode(previous)


@pytest.fixture(autouse=True)
def release_mode():
    '''Every test starts in 32-bit mode.'''
    previous = tensor.is_test_mode()
    tensor.set_test_mode(False)
    yield
    tensor.set_test_mode(previous)


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=len(DEFAULT_VOCAB),
                       max_seq_len=24,
                       n_layers=1,
                       n_heads=2,
                       d_model=16,
                       d_ff=32)


@pytest.fixture
def make_model(tiny_config):

    def make(role=ModelRole.STUDENT, seed=0, config=None):
        return LanguageModel(config or tiny_config, role=role, seed=seed)

    return make


@pytest.fixture
def copy_spec():
    return TaskSpec('copy', min_len=2, max_len=4)


@pytest.fixture
def copy_examples():
    '''Six labeled copy-task examples.'''
    payloads = ['ab', 'cd', 'abc', 'zyx', 'mnop', 'qq']
    return [
        Example('copy-{}'.format(i), encode_prompt(p + '='), encode_response(p), 'copy')
        for (i, p) in enumerate(payloads)
    ]
