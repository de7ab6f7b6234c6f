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
import math
import threading
from collections import abc
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from proxy_kd.constants import BOS_ID, EOS_ID, SplitName, Stage

logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.10, 0.45, 0.45)
FRACTION_TOLERANCE = 1e-9

# Stages that must never iterate a partition
FORBIDDEN_READERS = {
    SplitName.D_W: {Stage.ALIGN, Stage.DISTILL},
    SplitName.D_P: {Stage.WARMUP, Stage.DISTILL},
    SplitName.D_S: {Stage.WARMUP, Stage.ALIGN},
}


class CorpusFormatError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Example():
    '''
    A prompt/response pair. ``x`` starts with BOS; ``y`` is empty until the teacher labels it,
    and EOS-terminated afterwards.
    '''
    id: str
    x: Tuple[int, ...]
    y: Tuple[int, ...] = ()
    task_tag: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'x', tuple(int(t) for t in self.x))
        object.__setattr__(self, 'y', tuple(int(t) for t in self.y))

    @property
    def is_labeled(self) -> bool:
        return len(self.y) > 0 and self.y[-1] == EOS_ID

    def with_response(self, y: Sequence[int]) -> 'Example':
        return Example(self.id, self.x, tuple(y), self.task_tag)


_stage_local = threading.local()


@contextmanager
def stage_scope(stage: str):
    '''
    Marks the pipeline stage running on this thread, for partition access logging.
    '''
    previous = getattr(_stage_local, 'stage', None)
    _stage_local.stage = stage
    try:
        yield
    finally:
        _stage_local.stage = previous


def current_stage() -> Optional[str]:
    return getattr(_stage_local, 'stage', None)


class ExampleSplit(abc.Sequence):
    '''
    One partition of a split corpus. Reading examples records the current stage.
    '''

    def __init__(self, name: str, examples: Sequence[Example]):
        self.name = name
        self._examples = list(examples)
        self._accessed_by = set()

    def _touch(self):
        stage = current_stage()
        if stage is not None:
            self._accessed_by.add(stage)

    def __getitem__(self, index):
        self._touch()
        return self._examples[index]

    def __iter__(self) -> Iterator[Example]:
        self._touch()
        return iter(self._examples)

    def __len__(self):
        return len(self._examples)

    @property
    def accessed_by(self) -> FrozenSet[str]:
        return frozenset(self._accessed_by)

    def ids(self) -> List[str]:
        return [e.id for e in self._examples]


@dataclass
class SplitCorpus():
    d_w: ExampleSplit
    d_p: ExampleSplit
    d_s: ExampleSplit
    split_seed: int

    def parts(self) -> Dict[str, ExampleSplit]:
        return {
            SplitName.D_W: self.d_w,
            SplitName.D_P: self.d_p,
            SplitName.D_S: self.d_s
        }

    def sizes(self) -> Tuple[int, int, int]:
        return (len(self.d_w), len(self.d_p), len(self.d_s))

    def check_isolation(self):
        violations = [
            '{} read by {}'.format(name, stage)
            for (name, part) in self.parts().items()
            for stage in sorted(part.accessed_by & FORBIDDEN_READERS[name])
        ]
        if violations:
            raise SplitError('Stage isolation violated: {}'.format(
                '; '.join(violations)))


def split_sizes(n: int, fractions=DEFAULT_FRACTIONS) -> Tuple[int, int, int]:
    '''
    Floor for d_w, floor for d_p, remainder to d_s.
    '''
    n_w = int(math.floor(n * fractions[0] + FRACTION_TOLERANCE))
    n_p = int(math.floor(n * fractions[1] + FRACTION_TOLERANCE))
    return (n_w, n_p, n - n_w - n_p)


def split_corpus(examples: Sequence[Example],
                 fractions=DEFAULT_FRACTIONS,
                 seed: int = 0) -> SplitCorpus:
    '''
    Sorts by id, shuffles with ``seed`` and partitions into warm-up, proxy-alignment and
    student-distillation sets.
    '''
    if len(examples) < 3:
        raise SplitError('Need at least 3 examples to split, got {}'.format(
            len(examples)))
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or \
            abs(sum(fractions) - 1) > FRACTION_TOLERANCE:
        raise SplitError(
            'Fractions should be 3 positive numbers summing to 1, got {}'.format(
                fractions))
    ordered = sorted(examples, key=lambda e: e.id)
    for (a, b) in zip(ordered, ordered[1:]):
        if a.id == b.id:
            raise SplitError('Duplicate example id "{}"'.format(a.id))

    perm = np.random.default_rng(seed).permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    (n_w, n_p, _) = split_sizes(len(shuffled), fractions)
    return SplitCorpus(d_w=ExampleSplit(SplitName.D_W, shuffled[:n_w]),
                       d_p=ExampleSplit(SplitName.D_P,
                                        shuffled[n_w:n_w + n_p]),
                       d_s=ExampleSplit(SplitName.D_S, shuffled[n_w + n_p:]),
                       split_seed=seed)


def drop_overlong(examples: Sequence[Example], max_seq_len: int,
                  purpose: str) -> Tuple[List[Example], List[str]]:
    '''
    Keeps the examples whose prompt plus response fits ``max_seq_len``.

    :returns: The kept examples, in input order, and the ids of the skipped ones
    '''
    kept = []
    skipped = []
    for e in examples:
        if len(e.x) + len(e.y) > max_seq_len:
            logger.warning('Skipping example "{}" for {}: length {} exceeds max_seq_len {}'.format(
                e.id, purpose, len(e.x) + len(e.y), max_seq_len))
            skipped.append(e.id)
        else:
            kept.append(e)
    return (kept, skipped)


####################################
# JSONL
####################################


def _parse_tokens(value, vocab, is_prompt: bool, line_no: int, key: str):
    if isinstance(value, str):
        if vocab is None:
            raise CorpusFormatError(
                'line {}: "{}" is a raw string but no vocab map was given'.
                format(line_no, key))
        try:
            ids = vocab.encode(value)
        except ValueError as e:
            raise CorpusFormatError('line {}: {}'.format(line_no, e))
        if is_prompt:
            return (BOS_ID, *ids)
        return (*ids, EOS_ID) if value else ()
    if isinstance(value, list) and all(
            isinstance(t, int) and not isinstance(t, bool) and t >= 0
            for t in value):
        return tuple(value)
    raise CorpusFormatError(
        'line {}: "{}" should be a token-id array or a string'.format(
            line_no, key))


def load_jsonl(path: str, vocab=None) -> List[Example]:
    '''
    Reads examples, one JSON object per line with ``id``, ``prompt``, ``response`` and ``task_tag``.

    Prompts and responses are token-id arrays, or raw strings encoded with ``vocab`` (BOS is
    prepended to prompts, EOS appended to non-empty responses).
    '''
    examples = []
    seen = {}
    with open(path, encoding='utf-8') as f:
        for (line_no, line) in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError as e:
                raise CorpusFormatError('line {}: invalid JSON ({})'.format(
                    line_no, e))
            if not isinstance(obj, dict):
                raise CorpusFormatError(
                    'line {}: expected a JSON object'.format(line_no))
            missing = [
                k for k in ('id', 'prompt', 'response', 'task_tag')
                if k not in obj
            ]
            if missing:
                raise CorpusFormatError('line {}: missing field(s) {}'.format(
                    line_no, ', '.join(missing)))
            if not isinstance(obj['id'], str) or not isinstance(
                    obj['task_tag'], str):
                raise CorpusFormatError(
                    'line {}: "id" and "task_tag" should be strings'.format(
                        line_no))
            if obj['id'] in seen:
                raise CorpusFormatError(
                    'line {}: duplicate id "{}" (first seen on line {})'.format(
                        line_no, obj['id'], seen[obj['id']]))
            seen[obj['id']] = line_no

            x = _parse_tokens(obj['prompt'], vocab, True, line_no, 'prompt')
            y = _parse_tokens(obj['response'], vocab, False, line_no,
                              'response')
            examples.append(Example(obj['id'], x, y, obj['task_tag']))

    logger.info('Loaded {} examples from "{}"'.format(len(examples), path))
    return examples


def save_jsonl(examples: Sequence[Example], path: str):
    with open(path, 'w', encoding='utf-8') as f:
        for e in examples:
            f.write(
                json.dumps({
                    'id': e.id,
                    'prompt': list(e.x),
                    'response': list(e.y),
                    'task_tag': e.task_tag
                }) + '\n')
