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

from typing import List

import numpy as np

from proxy_kd.autodiff import GradientCase, Tensor
from proxy_kd.blackbox import build_logit_cache
from proxy_kd.constants import BOS_ID, EOS_ID
from proxy_kd.corpus import Example
from proxy_kd.model import LanguageModel, ModelConfig
from .objectives import PreferencePair, dpo_loss, forward_kl, nll_loss, proxy_loss, \
    student_loss, truncated_kl
from .weights import WeightStats

TINY_CONFIG = dict(vocab_size=6,
                   max_seq_len=8,
                   n_layers=1,
                   n_heads=2,
                   d_model=4,
                   d_ff=8)


def _tiny_model(rng: np.random.Generator) -> LanguageModel:
    model = LanguageModel(ModelConfig(**TINY_CONFIG))
    for (name, p) in model.params.items():
        p.data[...] = rng.normal(0.0, 0.5, size=p.shape)
        if name.endswith('.g'):
            p.data += 1.0
    return model


def _sequence(rng, n, prefix=(), suffix=()):
    body = rng.integers(3, TINY_CONFIG['vocab_size'], size=n)
    return (*prefix, *(int(t) for t in body), *suffix)


def _example(rng, example_id='case') -> Example:
    return Example(example_id, _sequence(rng, 2, prefix=(BOS_ID, )),
                   _sequence(rng, 2, suffix=(EOS_ID, )), 'case')


def _nll(rng):
    model = _tiny_model(rng)
    e = _example(rng)
    return (lambda: nll_loss(model, e.x, e.y), model.params)


def _forward_kl(rng):
    p = rng.standard_normal((3, 5))
    q = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    return (lambda: forward_kl(p, q), {'q': q})


def _truncated_kl(rng):
    source = _tiny_model(rng)
    e = _example(rng)
    (cache, _) = build_logit_cache(source, [e], k=3)
    entry = cache.entries(e.id)[int(rng.integers(0, len(e.y)))]
    q = Tensor(rng.standard_normal(TINY_CONFIG['vocab_size']),
               requires_grad=True)
    return (lambda: truncated_kl(entry, q), {'q': q})


def _pair(rng, e: Example) -> PreferencePair:
    return PreferencePair(e.x, e.y, _sequence(rng, 2, suffix=(EOS_ID, )))


def _policy_and_reference(rng):
    policy = _tiny_model(rng)
    reference = _tiny_model(rng).freeze()
    return (policy, reference)


def _dpo(rng):
    (policy, reference) = _policy_and_reference(rng)
    pair = _pair(rng, _example(rng))
    return (lambda: dpo_loss(policy, reference, pair, beta=0.5), policy.params)


def _proxy(rng):
    (policy, reference) = _policy_and_reference(rng)
    e = _example(rng)
    pair = _pair(rng, e)
    return (lambda: proxy_loss(policy, reference, e, pair, beta=0.5),
            policy.params)


def _student_cache(rng):
    student = _tiny_model(rng)
    proxy = _tiny_model(rng)
    e = _example(rng)
    (cache, _) = build_logit_cache(proxy, [e], k=3)
    stats = WeightStats(mu=0.0, gamma=1.0, weights={e.id: 0.7})
    return (lambda: student_loss(student, e, cache, stats, alpha=100.0),
            student.params)


def _student_proxy(rng):
    student = _tiny_model(rng)
    proxy = _tiny_model(rng).freeze()
    e = _example(rng)
    stats = WeightStats(mu=0.0, gamma=1.0, weights={e.id: 0.3})
    return (lambda: student_loss(student, e, proxy, stats, alpha=2.0),
            student.params)


def gradient_cases() -> List[GradientCase]:
    '''
    One finite-difference case per training objective, on tiny random models.
    '''
    return [
        GradientCase('nll', _nll),
        GradientCase('forward_kl', _forward_kl),
        GradientCase('truncated_kl', _truncated_kl),
        GradientCase('dpo', _dpo),
        GradientCase('student_weighted_kl', _student_cache),
        GradientCase('student_model_kl', _student_proxy),
        GradientCase('proxy', _proxy),
    ]
