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
from typing import Callable, Dict, List, NamedTuple, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor, backward, test_mode

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4
# Denominator floor; keeps all-zero gradients from dividing roundoff by roundoff
RELATIVE_ERROR_FLOOR = 1e-6

Objective = Callable[[], Tensor]
CaseBuilder = Callable[[np.random.Generator], Tuple[Objective, Dict[str,
                                                                     Tensor]]]


class GradientCase(NamedTuple):
    name: str
    build: CaseBuilder


def relative_error(auto: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(auto - numeric)
    scale = np.linalg.norm(auto) + np.linalg.norm(numeric)
    return float(diff / max(scale, RELATIVE_ERROR_FLOOR))


def check_gradients(fn: Objective,
                    inputs: Dict[str, Tensor],
                    eps: float = FD_STEP) -> Dict[str, float]:
    '''
    Compares tape gradients of the scalar ``fn()`` against central finite differences.

    ``fn`` is re-evaluated with each entry of each input nudged by ``±eps``, so it must read the
    input tensors' ``data`` at call time.

    :returns: Relative error per input name
    '''
    for t in inputs.values():
        t.grad = None
    with Tape():
        loss = fn()
        backward(loss)

    errors = {}
    for (name, t) in inputs.items():
        auto = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        for pos in np.ndindex(*t.shape):
            orig = t.data[pos]
            t.data[pos] = orig + eps
            f_plus = fn().item()
            t.data[pos] = orig - eps
            f_minus = fn().item()
            t.data[pos] = orig
            numeric[pos] = (f_plus - f_minus) / (2 * eps)
        errors[name] = relative_error(auto, numeric)

    return errors


def run_gradient_suite(cases: List[GradientCase],
                       instances: int = 10,
                       seed: int = 0,
                       eps: float = FD_STEP) -> Dict[str, float]:
    '''
    Runs every case on ``instances`` random draws in 64-bit mode.

    :returns: Maximum relative error per case name, in case order
    '''
    results = {}
    with test_mode(True):
        for (i, case) in enumerate(cases):
            worst = 0.0
            for j in range(instances):
                rng = np.random.default_rng([seed, i, j])
                (fn, inputs) = case.build(rng)
                errors = check_gradients(fn, inputs, eps=eps)
                worst = max([worst, *errors.values()])
            logger.info('Gradient check "{}": max relative error {:.3e}'.format(
                case.name, worst))
            results[case.name] = worst
    return results


####################################
# Primitive cases
####################################


def _leaf(rng: np.random.Generator, *shape, positive=False) -> Tensor:
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    # Random projection to a scalar so no output direction has a zero gradient by symmetry
    w = rng.standard_normal(out.shape)
    return T.reduce_sum(T.mul(out, w))


def _binary(op) -> CaseBuilder:

    def build(rng):
        (a, b) = (_leaf(rng, 3, 4), _leaf(rng, 4, positive=True))
        w = rng.standard_normal((3, 4))
        return (lambda: T.reduce_sum(T.mul(op(a, b), w)), {'a': a, 'b': b})

    return build


def _unary(op, positive=False) -> CaseBuilder:

    def build(rng):
        x = _leaf(rng, 2, 5, positive=positive)
        w = rng.standard_normal((2, 5))
        return (lambda: T.reduce_sum(T.mul(op(x), w)), {'x': x})

    return build


def _matmul(rng):
    (a, b) = (_leaf(rng, 2, 3, 4), _leaf(rng, 4, 5))
    w = rng.standard_normal((2, 3, 5))
    return (lambda: T.reduce_sum(T.mul(T.matmul(a, b), w)), {'a': a, 'b': b})


def _embedding(rng):
    weight = _leaf(rng, 6, 3)
    ids = rng.integers(0, 6, size=(2, 4))
    w = rng.standard_normal((2, 4, 3))
    return (lambda: T.reduce_sum(T.mul(T.embedding(weight, ids), w)), {
        'weight': weight
    })


def _layer_norm(rng):
    (x, g, b) = (_leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6))
    w = rng.standard_normal((3, 6))
    return (lambda: T.reduce_sum(T.mul(T.layer_norm(x, g, b), w)), {
        'x': x,
        'gamma': g,
        'beta': b
    })


def _attention(rng):
    (q, k) = (_leaf(rng, 2, 4, 3), _leaf(rng, 2, 4, 3))
    w = rng.standard_normal((2, 4, 4))
    # Softmax zeroes the masked scores, as in the model
    return (lambda: T.reduce_sum(
        T.mul(T.softmax(T.causal_attention_scores(q, k, 0.5)), w)), {
            'q': q,
            'k': k
        })


def _gather(rng):
    x = _leaf(rng, 3, 7)
    index = rng.integers(0, 7, size=(3, 2))
    w = rng.standard_normal((3, 2))
    return (lambda: T.reduce_sum(T.mul(T.gather(x, index), w)), {'x': x})


def _reductions(rng):
    x = _leaf(rng, 3, 4)
    w = rng.standard_normal(4)
    return (lambda: T.add(T.reduce_sum(T.mul(T.reduce_mean(x, axis=0), w)),
                          T.reduce_mean(T.mul(x, x))), {
                              'x': x
                          })


def primitive_cases() -> List[GradientCase]:
    return [
        GradientCase('add', _binary(T.add)),
        GradientCase('sub', _binary(T.sub)),
        GradientCase('mul', _binary(T.mul)),
        GradientCase('div', _binary(T.div)),
        GradientCase('matmul', _matmul),
        GradientCase('embedding', _embedding),
        GradientCase('softmax', _unary(T.softmax)),
        GradientCase('log_softmax', _unary(T.log_softmax)),
        GradientCase('layer_norm', _layer_norm),
        GradientCase('gelu', _unary(T.gelu)),
        GradientCase('attention_scores', _attention),
        GradientCase('gather', _gather),
        GradientCase('sum_mean', _reductions),
        GradientCase('sigmoid', _unary(T.sigmoid)),
        GradientCase('log_sigmoid', _unary(T.log_sigmoid)),
        GradientCase('log', _unary(T.log, positive=True)),
        GradientCase('exp', _unary(T.exp)),
    ]
