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
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from proxy_kd.autodiff import Tensor, add, as_tensor, div, exp, gather, getitem, log_sigmoid, \
    log_softmax, mul, neg, no_grad, reduce_mean, reduce_sum, reshape, sub
from proxy_kd.constants import Jsonable
from proxy_kd.corpus import Example
from proxy_kd.model import LanguageModel, response_logits_batch, sequence_log_prob, \
    sequence_log_prob_batch, pad_responses

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 100.0
DEFAULT_BETA = 0.1


class LossInputError(ValueError):
    pass


class KLReduction():
    TOKEN_MEAN = 'token_mean'
    SEQUENCE_SUM = 'sequence_sum'

    ALL = [TOKEN_MEAN, SEQUENCE_SUM]


@dataclass(frozen=True)
class LossConfig(Jsonable):
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    kl_reduction: str = KLReduction.TOKEN_MEAN
    weight_loglik: str = KLReduction.SEQUENCE_SUM

    def __post_init__(self):
        if self.alpha < 0:
            raise LossInputError('`alpha` should be >= 0, but is {}'.format(
                self.alpha))
        if self.beta <= 0:
            raise LossInputError('`beta` should be > 0, but is {}'.format(
                self.beta))
        for name in ('kl_reduction', 'weight_loglik'):
            if getattr(self, name) not in KLReduction.ALL:
                raise LossInputError('`{}` should be one of {}'.format(
                    name, KLReduction.ALL))


@dataclass(frozen=True)
class PreferencePair():
    '''
    Teacher response ``y_teacher`` preferred over the proxy sample ``y_proxy`` for prompt ``x``.
    '''
    x: Tuple[int, ...]
    y_teacher: Tuple[int, ...]
    y_proxy: Tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        for name in ('x', 'y_teacher', 'y_proxy'):
            object.__setattr__(self, name,
                               tuple(int(t) for t in getattr(self, name)))


def _check_response(y, what='response'):
    if len(y) == 0:
        raise LossInputError('Empty {}'.format(what))


####################################
# NLL
####################################


def nll_loss(model: LanguageModel, x, y) -> Tensor:
    '''
    Per-token mean negative log-likelihood of ``y`` given ``x``.
    '''
    _check_response(y)
    return neg(div(sequence_log_prob(model, x, y), float(len(y))))


def _lengths(ys) -> np.ndarray:
    return np.array([len(y) for y in ys], dtype=np.float64)


def _token_nll_rows(log_probs: Tensor, ys, mask: np.ndarray) -> Tensor:
    # (B, L, V) log-probabilities -> (B,) per-token mean NLL
    targets = pad_responses(ys)[:, :, None]
    lp = mul(reshape(gather(log_probs, targets), mask.shape), mask)
    return neg(div(reduce_sum(lp, axis=1), _lengths(ys)))


def nll_loss_batch(model: LanguageModel, examples: Sequence[Example]) -> Tensor:
    '''
    Batch mean of per-example :func:`nll_loss`.
    '''
    for e in examples:
        _check_response(e.y, 'response for example "{}"'.format(e.id))
    ys = [e.y for e in examples]
    (logits, mask) = response_logits_batch(model, [e.x for e in examples], ys)
    return reduce_mean(_token_nll_rows(log_softmax(logits), ys, mask))


####################################
# KL
####################################


def _kl_rows(p_logits: np.ndarray, q_logits: Tensor) -> Tensor:
    # sum_v p_v (log p_v - log q_v) over the last axis; p is a constant
    log_p = log_softmax(Tensor(p_logits))
    log_q = log_softmax(q_logits)
    return reduce_sum(mul(exp(log_p), sub(log_p, log_q)), axis=-1)


def _constant(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else np.asarray(p)


def forward_kl(p_logits, q_logits) -> Tensor:
    '''
    Per-token mean of ``KL(softmax(p) || softmax(q))`` over (T, V) logits. Only ``q`` receives gradient.
    '''
    p = _constant(p_logits)
    q = as_tensor(q_logits)
    if p.shape != q.shape or q.ndim != 2:
        raise LossInputError(
            'forward_kl: expected matching (T, V) logits, got {} and {}'.format(
                p.shape, q.shape))
    return reduce_mean(_kl_rows(p, q))


def sort_entry_by_id(ids, logits, vocab_size: int) -> Tuple[np.ndarray, np.ndarray]:
    '''
    Orders cached (..., K) ids and logits by token id, after validating them against the vocabulary.
    '''
    ids = np.asarray(ids)
    logits = np.asarray(logits)
    if ids.shape != logits.shape or ids.ndim == 0:
        raise LossInputError(
            'Cache ids {} and logits {} should share a shape'.format(
                ids.shape, logits.shape))
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise LossInputError(
            'Cache ids outside student vocabulary of size {}'.format(vocab_size))
    order = np.argsort(ids, axis=-1, kind='stable')
    sorted_ids = np.take_along_axis(ids, order, axis=-1).astype(np.int64)
    if np.any(sorted_ids[..., 1:] == sorted_ids[..., :-1]):
        raise LossInputError('Duplicate token ids in a cache entry')
    return (sorted_ids, np.take_along_axis(logits, order, axis=-1))


def truncated_kl(entry, student_logits_at_t) -> Tensor:
    '''
    KL between the cached top-K distribution and the student's distribution restricted to the same
    K ids, both renormalized over those ids.

    :param entry: A :class:`LogitCacheEntry`
    :param student_logits_at_t: Student logits of shape (V,) at the entry's position
    '''
    q = as_tensor(student_logits_at_t)
    if q.ndim != 1:
        raise LossInputError(
            'truncated_kl: student logits should be a (V,) row, got {}'.format(
                q.shape))
    (ids, p) = sort_entry_by_id(entry.ids, entry.logits, q.shape[0])
    q_k = reshape(gather(q, ids), (1, len(ids)))
    return reduce_sum(_kl_rows(p[None, :], q_k))


####################################
# Preference
####################################


def _dpo_terms(policy: LanguageModel, reference: LanguageModel,
               pairs: Sequence[PreferencePair],
               beta: float) -> Tuple[Tensor, np.ndarray]:
    # (B,) losses and margins
    for pair in pairs:
        _check_response(pair.y_teacher, 'teacher response in preference pair')
        _check_response(pair.y_proxy, 'proxy response in preference pair')
    if beta <= 0:
        raise LossInputError('`beta` should be > 0, but is {}'.format(beta))

    xs = [p.x for p in pairs] * 2
    ys = [p.y_teacher for p in pairs] + [p.y_proxy for p in pairs]
    n = len(pairs)
    policy_lp = sequence_log_prob_batch(policy, xs, ys)
    with no_grad():
        reference_lp = sequence_log_prob_batch(reference, xs, ys).data

    winner = sub(getitem(policy_lp, slice(0, n)), reference_lp[:n])
    loser = sub(getitem(policy_lp, slice(n, 2 * n)), reference_lp[n:])
    margin = sub(winner, loser)
    losses = neg(log_sigmoid(mul(margin, beta)))
    return (losses, margin.data.copy())


def dpo_loss(policy: LanguageModel, reference: LanguageModel,
             pair: PreferencePair, beta: float = DEFAULT_BETA) -> Tensor:
    '''
    ``-log sigmoid(beta * margin)`` where the margin is the policy-over-reference log-ratio of the
    teacher response minus that of the proxy response (sequence sums). The reference gets no gradient.
    '''
    (losses, _) = _dpo_terms(policy, reference, [pair], beta)
    return reduce_sum(losses)


def dpo_loss_batch(policy: LanguageModel, reference: LanguageModel,
                   pairs: Sequence[PreferencePair],
                   beta: float = DEFAULT_BETA) -> Tuple[Tensor, np.ndarray]:
    '''
    :returns: Mean DPO loss over ``pairs`` and the per-pair margins
    '''
    (losses, margins) = _dpo_terms(policy, reference, pairs, beta)
    return (reduce_mean(losses), margins)


def _check_pair_prompt(example: Example, pair: PreferencePair):
    if tuple(example.x) != pair.x:
        raise LossInputError(
            'Preference pair prompt does not match example "{}"'.format(
                example.id))


def proxy_loss(policy: LanguageModel,
               reference: LanguageModel,
               example: Example,
               pair: PreferencePair,
               beta: float = DEFAULT_BETA) -> Tensor:
    '''
    NLL of the teacher response plus the preference loss of ``pair``.
    '''
    _check_pair_prompt(example, pair)
    return add(nll_loss(policy, example.x, example.y),
               dpo_loss(policy, reference, pair, beta))


@dataclass
class ProxyBatchLoss():
    loss: Tensor
    nll: float
    dpo: Optional[float]
    margins: np.ndarray


def proxy_loss_batch(policy: LanguageModel,
                     reference: Optional[LanguageModel],
                     examples: Sequence[Example],
                     pairs: Sequence[Optional[PreferencePair]],
                     beta: float = DEFAULT_BETA) -> ProxyBatchLoss:
    '''
    Batch form of :func:`proxy_loss`: mean NLL over ``examples`` plus mean DPO loss over the pairs
    that are present. ``None`` marks an example with no preference pair.
    '''
    nll = nll_loss_batch(policy, examples)
    present = []
    for (e, pair) in zip(examples, pairs):
        if pair is not None:
            _check_pair_prompt(e, pair)
            present.append(pair)
    if not present or reference is None:
        return ProxyBatchLoss(nll, nll.item(), None, np.zeros(0))

    (dpo, margins) = dpo_loss_batch(policy, reference, present, beta)
    return ProxyBatchLoss(add(nll, dpo), nll.item(), dpo.item(), margins)


####################################
# Student
####################################


def _kl_source_rows(source, examples: Sequence[Example], student_logits: Tensor,
                    mask: np.ndarray) -> Tensor:
    # (B, L) per-position KL, zero past each response end
    (b, width, v) = student_logits.shape
    if isinstance(source, LanguageModel):
        with no_grad():
            (p_logits, _) = response_logits_batch(source,
                                                  [e.x for e in examples],
                                                  [e.y for e in examples])
        if p_logits.shape[-1] != v:
            raise LossInputError(
                'Soft-label model vocabulary {} does not match student vocabulary {}'
                .format(p_logits.shape[-1], v))
        rows = _kl_rows(p_logits.data, student_logits)
    else:
        k = source.k
        ids = np.zeros((b, width, k), dtype=np.int64)
        p = np.zeros((b, width, k), dtype=student_logits.data.dtype)
        for (i, e) in enumerate(examples):
            (entry_ids, entry_logits) = source.arrays(e.id)
            if len(entry_ids) != len(e.y):
                raise LossInputError(
                    'Cache holds {} positions for example "{}", response has {}'.
                    format(len(entry_ids), e.id, len(e.y)))
            (ids[i, :len(e.y)],
             p[i, :len(e.y)]) = sort_entry_by_id(entry_ids, entry_logits, v)
        # Rows past a response end compare identical dummies (id order 0..K-1, zero logits)
        ids[mask == 0] = np.arange(k)
        rows = _kl_rows(p, gather(student_logits, ids))
    return mul(rows, mask)


def student_loss_batch(student: LanguageModel,
                       examples: Sequence[Example],
                       source,
                       weights: Sequence[float],
                       alpha: float,
                       kl_reduction: str = KLReduction.TOKEN_MEAN) -> Tensor:
    '''
    Batch mean of :func:`student_loss`; ``weights`` are aligned with ``examples``.
    '''
    if alpha == 0:
        return nll_loss_batch(student, examples)
    if source is None:
        raise LossInputError('A soft-label source is needed when alpha > 0')
    for e in examples:
        _check_response(e.y, 'response for example "{}"'.format(e.id))

    ys = [e.y for e in examples]
    (logits, mask) = response_logits_batch(student, [e.x for e in examples], ys)
    nll = _token_nll_rows(log_softmax(logits), ys, mask)
    kl = reduce_sum(_kl_source_rows(source, examples, logits, mask), axis=1)
    if kl_reduction == KLReduction.TOKEN_MEAN:
        kl = div(kl, _lengths(ys))
    scale = alpha * np.asarray(weights, dtype=np.float64)
    return reduce_mean(add(nll, mul(kl, scale)))


def student_loss(student: LanguageModel,
                 example: Example,
                 source,
                 stats,
                 alpha: float = DEFAULT_ALPHA,
                 kl_reduction: str = KLReduction.TOKEN_MEAN) -> Tensor:
    '''
    ``nll_loss + alpha * w(x, y) * KL``, where the KL is against cached top-K proxy logits
    (:func:`truncated_kl`) or a full soft-label model (:func:`forward_kl`), averaged over response
    positions.

    :param source: A :class:`LogitCacheFile` or a :class:`LanguageModel`
    :param stats: A :class:`WeightStats` holding the example's weight
    '''
    if alpha == 0:
        return nll_loss(student, example.x, example.y)
    return student_loss_batch(student, [example], source,
                              [stats.weight(example.id)], alpha, kl_reduction)
