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

import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)

DEFAULT_LEARNING_RATE = 3e-4


class MissingGradientError(ValueError):
    pass


@dataclass
class AdamState():
    '''
    First/second moment estimates keyed by parameter name, plus the step counter.
    '''
    lr: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], state: AdamState):
    '''
    Applies one bias-corrected Adam update to every parameter in place, then clears grads.

    :param params: Parameters by name; each should have ``grad`` populated
    :param state: Moment estimates, created lazily on the first step
    '''
    missing = [name for (name, p) in params.items() if p.grad is None]
    if missing:
        raise MissingGradientError(
            'adam_step: no gradient for parameter(s) {}'.format(
                ', '.join(sorted(missing))))
    for (name, p) in params.items():
        for moment in (state.m.get(name), state.v.get(name)):
            if moment is not None and moment.shape != p.shape:
                raise ShapeError(
                    'adam_step: moment of shape {} does not match parameter "{}" of shape {}'
                    .format(moment.shape, name, p.shape))

    # State and parameters change only after every check passes
    state.step += 1
    bias1 = 1 - state.beta1**state.step
    bias2 = 1 - state.beta2**state.step

    for (name, p) in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        (m, v) = (state.m[name], state.v[name])

        g = p.grad
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            p.data.dtype)
        p.grad = None


class Adam():
    '''
    Binds a parameter dictionary to an :class:`AdamState`.
    '''

    def __init__(self, params: Dict[str, Tensor], lr=DEFAULT_LEARNING_RATE):
        self.params = params
        self.state = AdamState(lr=lr)

    def step(self):
        adam_step(self.params, self.state)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
