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

import json
import logging
import string
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from proxy_kd.constants import BOS_ID, EOS_ID, PAD_ID, TaskName
from .dataset import Example

logger = logging.getLogger(__name__)

SPECIAL_SYMBOLS = ['<pad>', '<bos>', '<eos>']
TASK_SYMBOLS = list(string.digits) + list(string.ascii_lowercase) + ['+', '=']

MAX_PAYLOAD_LEN = 12
# Enumerate and permute the whole prompt space below this size; sample above it
ENUMERATE_LIMIT = 1_000_000


class InsufficientPromptSpaceError(ValueError):
    pass


class MalformedPromptError(ValueError):
    pass


class Vocab():
    '''
    Symbol-level vocabulary: PAD, BOS, EOS, then the task alphabet.
    '''

    def __init__(self, symbols: Sequence[str]):
        symbols = list(symbols)
        if symbols[:3] != SPECIAL_SYMBOLS:
            raise ValueError('Vocab should start with {}'.format(SPECIAL_SYMBOLS))
        if len(set(symbols)) != len(symbols):
            raise ValueError('Vocab symbols should be unique')
        self._itos = symbols
        self._stoi = {s: i for (i, s) in enumerate(symbols)}

    @classmethod
    def default(cls) -> 'Vocab':
        return cls(SPECIAL_SYMBOLS + TASK_SYMBOLS)

    def __len__(self):
        return len(self._itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self._itos == other._itos

    def __contains__(self, symbol: str):
        return symbol in self._stoi

    def id_of(self, symbol: str) -> int:
        return self._stoi[symbol]

    def encode(self, text: str) -> List[int]:
        unknown = sorted(set(c for c in text if c not in self._stoi))
        if unknown:
            raise ValueError('Unknown symbol(s) {} for vocab'.format(unknown))
        return [self._stoi[c] for c in text]

    def decode(self, ids: Iterable[int]) -> str:
        '''
        Joins task symbols, skipping BOS and PAD and stopping at EOS.
        '''
        out = []
        for i in ids:
            if i == EOS_ID:
                break
            if i in (BOS_ID, PAD_ID):
                continue
            out.append(self._itos[i])
        return ''.join(out)

    def to_jsonable(self) -> Dict[str, int]:
        return dict(self._stoi)

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_jsonable(), f, indent=2)

    @classmethod
    def load(cls, path: str) -> 'Vocab':
        with open(path, encoding='utf-8') as f:
            mapping = json.load(f)
        ids = sorted(mapping.values())
        if ids != list(range(len(ids))):
            raise ValueError(
                'Vocab map "{}" should assign ids 0..{} exactly once'.format(
                    path,
                    len(ids) - 1))
        return cls(sorted(mapping, key=mapping.get))


DEFAULT_VOCAB = Vocab.default()


@dataclass(frozen=True)
class TaskSpec():
    '''
    A synthetic task with a unique, computable answer per prompt.

    ``modadd`` prompts read ``a+b=`` with ``a, b`` in ``[0, modulus)``. ``copy`` and ``reverse``
    take lowercase payloads, ``sortdigits`` digit payloads, of length ``min_len..max_len``.
    '''
    name: str
    modulus: int = 97
    min_len: int = 4
    max_len: int = 8

    def __post_init__(self):
        if self.name not in TaskName.ALL:
            raise ValueError('Unknown task "{}", should be one of {}'.format(
                self.name, TaskName.ALL))
        if not 2 <= self.modulus <= 10**6:
            raise ValueError('`modulus` should be in [2, 1000000], but is {}'.format(
                self.modulus))
        if not 1 <= self.min_len <= self.max_len <= MAX_PAYLOAD_LEN:
            raise ValueError(
                'Lengths should satisfy 1 <= min_len <= max_len <= {}, got {}..{}'
                .format(MAX_PAYLOAD_LEN, self.min_len, self.max_len))

    @property
    def alphabet(self) -> str:
        if self.name == TaskName.SORTDIGITS:
            return string.digits
        return string.ascii_lowercase

    def max_prompt_len(self) -> int:
        if self.name == TaskName.MODADD:
            width = len(str(self.modulus - 1))
            return 1 + 2 * width + 2
        return 1 + self.max_len + 1

    def max_response_len(self) -> int:
        if self.name == TaskName.MODADD:
            return len(str(self.modulus - 1)) + 1
        return self.max_len + 1


def prompt_space_size(spec: TaskSpec) -> int:
    if spec.name == TaskName.MODADD:
        return spec.modulus**2
    base = len(spec.alphabet)
    return sum(base**n for n in range(spec.min_len, spec.max_len + 1))


def prompt_text(spec: TaskSpec, index: int) -> str:
    '''
    Maps an index in ``[0, prompt_space_size(spec))`` to its prompt text, bijectively.
    '''
    if spec.name == TaskName.MODADD:
        (a, b) = divmod(index, spec.modulus)
        return '{}+{}='.format(a, b)

    alphabet = spec.alphabet
    base = len(alphabet)
    for n in range(spec.min_len, spec.max_len + 1):
        if index < base**n:
            chars = []
            for _ in range(n):
                (index, r) = divmod(index, base)
                chars.append(alphabet[r])
            return ''.join(chars) + '='
        index -= base**n
    raise IndexError('Prompt index out of range')


def encode_prompt(text: str, vocab: Vocab = DEFAULT_VOCAB) -> Tuple[int, ...]:
    return (BOS_ID, *vocab.encode(text))


def encode_response(text: str, vocab: Vocab = DEFAULT_VOCAB) -> Tuple[int, ...]:
    return (*vocab.encode(text), EOS_ID)


def generate_task_corpus(spec: TaskSpec,
                         n: int,
                         seed: int,
                         exclude: Optional[Set[Tuple[int, ...]]] = None,
                         vocab: Vocab = DEFAULT_VOCAB) -> List[Example]:
    '''
    Draws ``n`` distinct prompts (responses left empty) deterministically from ``seed``.

    :param exclude: Prompt token tuples that should not be drawn, e.g. the training prompts when building a test set
    '''
    if n < 1:
        raise ValueError('`n` should be at least 1, but is {}'.format(n))
    exclude = exclude or set()
    space = prompt_space_size(spec)
    if n > space - len(exclude):
        raise InsufficientPromptSpaceError(
            'Task "{}" has {} distinct prompts ({} excluded), cannot draw {}'.format(
                spec.name, space, len(exclude), n))

    rng = np.random.default_rng(seed)
    prompts = []
    if space <= ENUMERATE_LIMIT:
        for index in rng.permutation(space):
            x = encode_prompt(prompt_text(spec, int(index)), vocab)
            if x not in exclude:
                prompts.append(x)
                if len(prompts) == n:
                    break
        if len(prompts) < n:
            raise InsufficientPromptSpaceError(
                'Task "{}": only {} prompts remain after exclusion, cannot draw {}'
                .format(spec.name, len(prompts), n))
    else:
        seen = set(exclude)
        while len(prompts) < n:
            x = encode_prompt(prompt_text(spec, int(rng.integers(0, space))),
                              vocab)
            if x not in seen:
                seen.add(x)
                prompts.append(x)

    return [
        Example('{}-{}-{:07d}'.format(spec.name, seed, i), x, (), spec.name)
        for (i, x) in enumerate(prompts)
    ]


def _parse_payload(spec: TaskSpec, x: Sequence[int], vocab: Vocab) -> str:
    x = list(x)
    if len(x) < 2 or x[0] != BOS_ID or any(t < 0 or t >= len(vocab)
                                           for t in x):
        raise MalformedPromptError(
            'Prompt should start with BOS and hold valid ids: {}'.format(x))
    text = vocab.decode(x[1:])
    if len(text) != len(x) - 1 or not text.endswith('='):
        raise MalformedPromptError(
            'Prompt {} should end with "=" and hold only task symbols'.format(x))
    return text[:-1]


def ground_truth(spec: TaskSpec,
                 x: Sequence[int],
                 vocab: Vocab = DEFAULT_VOCAB) -> Tuple[int, ...]:
    '''
    :returns: The unique correct response tokens for prompt ``x``, EOS-terminated
    '''
    payload = _parse_payload(spec, x, vocab)

    if spec.name == TaskName.MODADD:
        operands = payload.split('+')
        if len(operands) != 2 or not all(
                o.isdigit() and (o == '0' or not o.startswith('0'))
                for o in operands):
            raise MalformedPromptError(
                'modadd prompt should read "a+b=", got "{}="'.format(payload))
        (a, b) = (int(operands[0]), int(operands[1]))
        if a >= spec.modulus or b >= spec.modulus:
            raise MalformedPromptError(
                'modadd operands should be below {}, got "{}="'.format(
                    spec.modulus, payload))
        return encode_response(str((a + b) % spec.modulus), vocab)

    if not spec.min_len <= len(payload) <= spec.max_len or any(
            c not in spec.alphabet for c in payload):
        raise MalformedPromptError(
            '{} prompt should hold {}..{} symbols from "{}", got "{}="'.format(
                spec.name, spec.min_len, spec.max_len, spec.alphabet, payload))
    if spec.name == TaskName.COPY:
        answer = payload
    elif spec.name == TaskName.REVERSE:
        answer = payload[::-1]
    else:
        answer = ''.join(sorted(payload))
    return encode_response(answer, vocab)

