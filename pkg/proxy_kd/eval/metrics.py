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
from typing import Iterable, List, Sequence

import numpy as np

from proxy_kd.autodiff import no_grad
from proxy_kd.corpus import Example, TaskSpec, ground_truth
from proxy_kd.model import LanguageModel, greedy_decode, response_logits
from proxy_kd.utils import ordered_map

logger = logging.getLogger(__name__)


class TrainTestOverlapError(ValueError):

    def __init__(self, offenders: Sequence[str]):
        self.offenders = sorted(offenders)
        super().__init__('Test set shares {} example id(s) with training data: {}'.format(
            len(self.offenders), ', '.join(self.offenders)))


def check_disjoint(testset: Iterable[Example], training_ids: Iterable[str]):
    offenders = {e.id for e in testset} & set(training_ids)
    if offenders:
        raise TrainTestOverlapError(offenders)


def task_accuracy(model: LanguageModel,
                  testset: Sequence[Example],
                  spec: TaskSpec,
                  training_ids: Iterable[str] = (),
                  threads: int = 1) -> float:
    '''
    Fraction of test prompts whose greedy decode equals the ground-truth answer exactly.

    :param training_ids: Ids of every example seen in training; any overlap fails the evaluation
    '''
    testset = list(testset)
    if not testset:
        raise ValueError('Accuracy needs a non-empty test set')
    check_disjoint(testset, training_ids)

    def correct(e: Example) -> bool:
        truth = ground_truth(spec, e.x)
        return tuple(greedy_decode(model, e.x, max_new=len(truth))) == truth

    hits = ordered_map(correct, testset, threads=threads)
    return sum(hits) / len(hits)


def match_ratio_from_logits(logits: Sequence[np.ndarray], ys: Sequence[Sequence[int]]) -> float:
    '''
    Fraction of response positions where the top-1 token (lowest id on ties) equals the teacher's.

    :param logits: One ``(|y|, V)`` array per example
    '''
    if len(logits) == 0:
        raise ValueError('Match ratio needs a non-empty example set')
    matches = 0
    total = 0
    for (rows, y) in zip(logits, ys):
        if len(rows) != len(y):
            raise ValueError('Logits cover {} positions, response has {}'.format(
                len(rows), len(y)))
        # np.argmax returns the first maximum
        matches += int(np.sum(np.argmax(rows, axis=-1) == np.asarray(y)))
        total += len(y)
    if total == 0:
        raise ValueError('Match ratio needs at least one response position')
    return matches / total


def _response_logits_list(model: LanguageModel, examples: Sequence[Example],
                          threads: int) -> List[np.ndarray]:

    def score(e: Example) -> np.ndarray:
        with no_grad():
            return response_logits(model, e.x, e.y).data

    return ordered_map(score, examples, threads=threads)


def match_ratio(proxy: LanguageModel, examples: Sequence[Example], threads: int = 1) -> float:
    examples = list(examples)
    if not examples:
        raise ValueError('Match ratio needs a non-empty example set')
    return match_ratio_from_logits(_response_logits_list(proxy, examples, threads),
                                   [e.y for e in examples])
