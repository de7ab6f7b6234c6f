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
from typing import Callable, Iterator, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from proxy_kd.autodiff import Adam, Tape, Tensor, backward
from proxy_kd.corpus import Example
from proxy_kd.eval.log import MetricLogger
from proxy_kd.model import LanguageModel

logger = logging.getLogger(__name__)

LossFn = Callable[[List[Example]], Tensor]


def epoch_batches(examples: Sequence[Example], batch_size: int, seed: int,
                  epoch: int) -> List[List[Example]]:
    '''
    One pass over ``examples`` in a permutation derived from ``(seed, epoch)``.
    '''
    order = np.random.default_rng([seed, epoch]).permutation(len(examples))
    return [[examples[i] for i in order[start:start + batch_size]]
            for start in range(0, len(examples), batch_size)]


def iterate_batches(examples: Sequence[Example], batch_size: int,
                    seed: int) -> Iterator[List[Example]]:
    examples = list(examples)
    if not examples:
        raise ValueError('Cannot batch an empty example set')
    epoch = 0
    while True:
        yield from epoch_batches(examples, batch_size, seed, epoch)
        epoch += 1


def train_step(loss_fn: LossFn, batch: List[Example], optimizer: Adam) -> float:
    with Tape():
        loss = loss_fn(batch)
        backward(loss)
    optimizer.step()
    return loss.item()


def train_steps(model: LanguageModel,
                examples: Sequence[Example],
                loss_fn: LossFn,
                steps: int,
                batch_size: int,
                seed: int,
                optimizer: Optional[Adam] = None,
                lr: Optional[float] = None,
                metric_logger: Optional[MetricLogger] = None,
                on_step: Optional[Callable[[int], None]] = None,
                progress: bool = False) -> List[float]:
    '''
    Runs ``steps`` optimizer updates over seeded, epoch-wise shuffled batches.

    :param on_step: Called with the 1-based step number after every update
    :returns: The loss of every step
    '''
    if optimizer is None:
        optimizer = Adam(model.params) if lr is None else Adam(model.params, lr=lr)
    batches = iterate_batches(examples, batch_size, seed)
    losses = []
    for step in tqdm(range(1, steps + 1), desc=model.role, disable=not progress):
        value = train_step(loss_fn, next(batches), optimizer)
        losses.append(value)
        if metric_logger is not None:
            metric_logger.log(step=step, loss=value)
        if on_step is not None:
            on_step(step)
    return losses


def steps_per_epoch(n_examples: int, batch_size: int) -> int:
    return -(-n_examples // batch_size)
