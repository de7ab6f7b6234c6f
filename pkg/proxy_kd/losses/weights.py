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
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from proxy_kd.autodiff import no_grad
from proxy_kd.constants import Jsonable
from proxy_kd.corpus import Example, drop_overlong
from proxy_kd.model import LanguageModel, sequence_log_prob
from proxy_kd.utils.parallel import ordered_map
from .objectives import KLReduction, LossInputError

logger = logging.getLogger(__name__)

GAMMA_EPS = 1e-8
DEGENERATE_WEIGHT = 0.5


def sigmoid(z: np.ndarray) -> np.ndarray:
    # Exactly 0.5 at 0, no overflow
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class WeightStats(Jsonable):
    '''
    Dataset-level statistics of the proxy's log-likelihoods of teacher responses, and the
    per-example weights ``sigmoid((loglik - mu) / gamma)`` derived from them.
    '''
    mu: float
    gamma: float
    weights: Dict[str, float]
    logliks: Dict[str, float] = field(default_factory=dict)
    skipped: List[str] = field(default_factory=list)

    def weight(self, example_id: str) -> float:
        if example_id not in self.weights:
            raise LossInputError(
                'No sample weight for example "{}"'.format(example_id))
        return self.weights[example_id]

    @property
    def degenerate(self) -> bool:
        return self.gamma < GAMMA_EPS

    def standardized(self) -> np.ndarray:
        values = np.array(list(self.logliks.values()), dtype=np.float64)
        return (values - self.mu) / self.gamma

    @classmethod
    def unit(cls, example_ids: Sequence[str]) -> 'WeightStats':
        '''
        Every weight 1.0, for distillation without sample weighting.
        '''
        return cls(mu=0.0, gamma=0.0, weights={i: 1.0 for i in example_ids})

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_jsonable(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> 'WeightStats':
        with open(path, encoding='utf-8') as f:
            return cls.from_jsonable(json.load(f))


def weights_from_logliks(logliks: Dict[str, float]) -> WeightStats:
    '''
    Standardizes log-likelihoods with their mean and population standard deviation, then squashes
    them through a sigmoid. A spread below ``GAMMA_EPS`` gives every example weight 0.5.
    '''
    if not logliks:
        raise LossInputError('Weight statistics need at least one example')
    ids = sorted(logliks)
    values = np.array([logliks[i] for i in ids], dtype=np.float64)
    mu = float(np.mean(values))
    gamma = float(np.std(values))
    if gamma < GAMMA_EPS:
        weights = np.full(len(values), DEGENERATE_WEIGHT)
    else:
        weights = sigmoid((values - mu) / gamma)
    return WeightStats(mu=mu,
                       gamma=gamma,
                       weights={i: float(w) for (i, w) in zip(ids, weights)},
                       logliks={i: float(v) for (i, v) in zip(ids, values)})


def compute_weight_stats(proxy: LanguageModel,
                         d_s: Sequence[Example],
                         reduction: str = KLReduction.SEQUENCE_SUM,
                         threads: int = 1) -> WeightStats:
    '''
    One offline pass of the proxy over ``d_s``, scoring each teacher response.

    Examples longer than the proxy context are left out of the statistics and listed in
    ``skipped``, as :func:`~proxy_kd.blackbox.build_logit_cache` does.
    '''
    (examples, skipped) = drop_overlong(list(d_s), proxy.config.max_seq_len, 'weight statistics')
    if not examples:
        raise LossInputError('Weight statistics need a non-empty d_s')

    def score(e: Example) -> float:
        with no_grad():
            lp = sequence_log_prob(proxy, e.x, e.y).item()
        return lp / len(e.y) if reduction == KLReduction.TOKEN_MEAN else lp

    scores = ordered_map(score, examples, threads=threads)
    stats = weights_from_logliks({e.id: s for (e, s) in zip(examples, scores)})
    stats.skipped = skipped
    logger.info('Weight statistics over {} examples ({} skipped): mu={:.4f}, gamma={:.4f}'.format(
        len(examples), len(skipped), stats.mu, stats.gamma))
    return stats
