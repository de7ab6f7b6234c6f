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

import abc
import hashlib
import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from proxy_kd.constants import EOS_ID, TaskName, TeacherBackend
from proxy_kd.corpus import DEFAULT_VOCAB, MalformedPromptError, TaskSpec, Vocab, ground_truth
from proxy_kd.model import LanguageModel, sample

logger = logging.getLogger(__name__)


class TeacherInputError(ValueError):
    pass


def example_seed(seed: int, example_id: str) -> int:
    '''
    Derives a per-example seed that does not depend on iteration order.
    '''
    digest = hashlib.sha256('{}/{}'.format(seed, example_id).encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little') >> 1


class BlackBoxTeacher(abc.ABC):
    '''
    A teacher reachable only through generated responses.

    Implementations expose nothing but :meth:`generate`: no logits, log-probabilities or parameters.
    '''

    __slots__ = ()

    @property
    @abc.abstractmethod
    def backend(self) -> str:
        raise NotImplementedError()

    @abc.abstractmethod
    def generate(self, x: Sequence[int], seed: int) -> Tuple[int, ...]:
        '''
        Returns an EOS-terminated response to prompt ``x``, deterministic per ``(x, seed)``.
        '''
        raise NotImplementedError()


class ProgrammaticTeacher(BlackBoxTeacher):
    '''
    Answers with the task's ground truth. With probability ``noise_rate`` the answer is replaced
    by a different well-formed one.
    '''

    __slots__ = ('_spec', '_noise_rate', '_vocab')

    def __init__(self,
                 spec: TaskSpec,
                 noise_rate: float = 0.0,
                 vocab: Vocab = DEFAULT_VOCAB):
        if not 0.0 <= noise_rate <= 1.0:
            raise ValueError(
                '`noise_rate` should be in [0, 1], but is {}'.format(noise_rate))
        self._spec = spec
        self._noise_rate = float(noise_rate)
        self._vocab = vocab

    @property
    def backend(self) -> str:
        return TeacherBackend.PROGRAMMATIC

    def generate(self, x, seed):
        try:
            y = ground_truth(self._spec, x, self._vocab)
        except MalformedPromptError as e:
            raise TeacherInputError(str(e))
        if self._noise_rate == 0.0:
            return y

        rng = np.random.default_rng([int(seed), *(int(t) for t in x)])
        if rng.random() < self._noise_rate:
            return self._corrupt(y, rng)
        return y

    def _corrupt(self, y, rng):
        answer = self._vocab.decode(y)
        if self._spec.name == TaskName.MODADD:
            m = self._spec.modulus
            wrong = (int(answer) + int(rng.integers(1, m))) % m
            return (*self._vocab.encode(str(wrong)), EOS_ID)

        alphabet = self._spec.alphabet
        pos = int(rng.integers(0, len(answer)))
        choices = [c for c in alphabet if c != answer[pos]]
        symbol = choices[int(rng.integers(0, len(choices)))]
        wrong = answer[:pos] + symbol + answer[pos + 1:]
        return (*self._vocab.encode(wrong), EOS_ID)


class TransformerTeacher(BlackBoxTeacher):
    '''
    Wraps a trained teacher model behind a generate-only boundary.

    The model is frozen, copied and captured in a closure; the instance keeps no attribute
    referring to it.
    '''

    __slots__ = ('_generate', )

    def __init__(self,
                 model: LanguageModel,
                 temperature: float = 0.0,
                 max_new: Optional[int] = None):
        frozen = model.copy(frozen=True)
        max_seq_len = frozen.config.max_seq_len

        def generate(x, seed):
            if len(x) >= max_seq_len:
                raise TeacherInputError(
                    'Prompt of length {} leaves no room within max_seq_len {}'.
                    format(len(x), max_seq_len))
            budget = min(max_new or max_seq_len, max_seq_len - len(x))
            y = sample(frozen, x, temperature, budget, seed)
            if y[-1] != EOS_ID:
                # Out of room: the last slot becomes EOS
                y[-1] = EOS_ID
            return tuple(y)

        self._generate = generate

    @property
    def backend(self) -> str:
        return TeacherBackend.TRANSFORMER

    def generate(self, x, seed):
        return self._generate(x, seed)


def teacher_generate(teacher: BlackBoxTeacher, x: Sequence[int],
                     seed: int) -> Tuple[int, ...]:
    y = tuple(teacher.generate(tuple(x), seed))
    if not y or y[-1] != EOS_ID:
        raise TeacherInputError(
            'Teacher returned a response without EOS for prompt {}'.format(
                list(x)))
    return y
