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
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from proxy_kd.autodiff import Tensor, add, causal_attention_scores, embedding, gather, gelu, \
    getitem, layer_norm, log_softmax, matmul, mul, no_grad, reduce_sum, reshape, softmax, transpose
from proxy_kd.constants import EOS_ID, PAD_ID, ModelRole, Jsonable

logger = logging.getLogger(__name__)

INIT_STD = 0.02

Tokens = Sequence[int]


class ModelInputError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig(Jsonable):
    vocab_size: int
    max_seq_len: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512

    def __post_init__(self):
        for name in ('vocab_size', 'max_seq_len', 'n_layers', 'n_heads',
                     'd_model', 'd_ff'):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ModelInputError(
                    '`{}` should be a positive int, but is {}'.format(
                        name, value))
        if self.d_model % self.n_heads != 0:
            raise ModelInputError(
                '`d_model` ({}) should be divisible by `n_heads` ({})'.format(
                    self.d_model, self.n_heads))
        if self.max_seq_len < 2:
            raise ModelInputError('`max_seq_len` should be at least 2')

    def to_jsonable(self):
        return {k: int(v) for (k, v) in asdict(self).items()}

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def _init_params(config: ModelConfig, seed: int) -> Dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    (d, f, v) = (config.d_model, config.d_ff, config.vocab_size)

    def normal(*shape):
        return rng.normal(0.0, INIT_STD, size=shape)

    shapes = {
        'tok_emb': normal(v, d),
        'pos_emb': normal(config.max_seq_len, d),
    }
    for i in range(config.n_layers):
        shapes.update({
            f'h{i}.ln1.g': np.ones(d),
            f'h{i}.ln1.b': np.zeros(d),
            f'h{i}.attn.w_q': normal(d, d),
            f'h{i}.attn.w_k': normal(d, d),
            f'h{i}.attn.w_v': normal(d, d),
            # Residual projections scaled down with depth
            f'h{i}.attn.w_o': normal(d, d) / np.sqrt(2 * config.n_layers),
            f'h{i}.ln2.g': np.ones(d),
            f'h{i}.ln2.b': np.zeros(d),
            f'h{i}.mlp.w_fc': normal(d, f),
            f'h{i}.mlp.b_fc': np.zeros(f),
            f'h{i}.mlp.w_proj': normal(f, d) / np.sqrt(2 * config.n_layers),
            f'h{i}.mlp.b_proj': np.zeros(d),
        })
    shapes.update({
        'ln_f.g': np.ones(d),
        'ln_f.b': np.zeros(d),
        'lm_head.w': normal(d, v),
        'lm_head.b': np.zeros(v),
    })
    return {
        name: Tensor(value, requires_grad=True, name=name)
        for (name, value) in shapes.items()
    }


class LanguageModel():
    '''
    Pre-norm decoder-only transformer with learned positional embeddings.

    The same class plays the student, the proxy and the transformer teacher; ``role`` only tags it.
    A frozen model records nothing on the tape.
    '''

    def __init__(self,
                 config: ModelConfig,
                 role: str = ModelRole.STUDENT,
                 seed: int = 0,
                 params: Optional[Dict[str, Tensor]] = None):
        if role not in ModelRole.ALL:
            raise ModelInputError('Unknown model role "{}"'.format(role))
        self.config = config
        self.role = role
        self.params = params if params is not None else _init_params(
            config, seed)
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> 'LanguageModel':
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self._frozen = True
        return self

    def copy(self, frozen: bool = False, role: Optional[str] = None) -> 'LanguageModel':
        params = {
            name: Tensor(p.data.copy(), requires_grad=True, name=name)
            for (name, p) in self.params.items()
        }
        clone = LanguageModel(self.config, role=role or self.role, params=params)
        return clone.freeze() if frozen else clone

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def forward(self, tokens) -> Tensor:
        return forward(self, tokens)

    def sequence_log_prob(self, x: Tokens, y: Tokens) -> Tensor:
        return sequence_log_prob(self, x, y)

    def sample(self, x: Tokens, temperature: float, max_new: int,
               seed: int) -> List[int]:
        return sample(self, x, temperature, max_new, seed)

    def greedy_decode(self, x: Tokens, max_new: Optional[int] = None) -> List[int]:
        return greedy_decode(self, x, max_new=max_new)

    def __repr__(self):
        return 'LanguageModel(role={}, {})'.format(self.role, self.config)


####################################
# Forward
####################################


def _validate_tokens(config: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise ModelInputError(
            'Tokens should be a non-empty (batch, time) matrix, but have shape {}'
            .format(tokens.shape))
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ModelInputError('Tokens should be integers, got dtype {}'.format(
            tokens.dtype))
    if tokens.shape[1] > config.max_seq_len:
        raise ModelInputError(
            'Sequence of length {} exceeds max_seq_len {}'.format(
                tokens.shape[1], config.max_seq_len))
    bad = np.argwhere((tokens < 0) | (tokens >= config.vocab_size))
    if len(bad) > 0:
        (b, t) = (int(bad[0][0]), int(bad[0][1]))
        raise ModelInputError(
            'Token id {} at position (batch={}, t={}) outside vocabulary of size {}'
            .format(int(tokens[b, t]), b, t, config.vocab_size))
    return tokens


def _attention(model: LanguageModel, i: int, h: Tensor) -> Tensor:
    c = model.config
    p = model.params
    (b, t, d) = h.shape

    def heads(w):
        # (B, T, D) -> (B, H, T, d_head)
        return transpose(reshape(matmul(h, w), (b, t, c.n_heads, c.d_head)),
                         (0, 2, 1, 3))

    q = heads(p[f'h{i}.attn.w_q'])
    k = heads(p[f'h{i}.attn.w_k'])
    v = heads(p[f'h{i}.attn.w_v'])
    att = softmax(causal_attention_scores(q, k, 1 / np.sqrt(c.d_head)))
    out = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (b, t, d))
    return matmul(out, p[f'h{i}.attn.w_o'])


def _mlp(model: LanguageModel, i: int, h: Tensor) -> Tensor:
    p = model.params
    h = gelu(add(matmul(h, p[f'h{i}.mlp.w_fc']), p[f'h{i}.mlp.b_fc']))
    return add(matmul(h, p[f'h{i}.mlp.w_proj']), p[f'h{i}.mlp.b_proj'])


def forward(model: LanguageModel, tokens) -> Tensor:
    '''
    Computes next-token logits for a token batch.

    :param tokens: Integer matrix of shape (B, T), or a single sequence of length T
    :returns: Logits of shape (B, T, vocab_size)
    '''
    tokens = _validate_tokens(model.config, tokens)
    p = model.params
    t = tokens.shape[1]

    x = add(embedding(p['tok_emb'], tokens), getitem(p['pos_emb'], slice(0, t)))
    for i in range(model.config.n_layers):
        x = add(x, _attention(model, i,
                              layer_norm(x, p[f'h{i}.ln1.g'], p[f'h{i}.ln1.b'])))
        x = add(x, _mlp(model, i, layer_norm(x, p[f'h{i}.ln2.g'],
                                             p[f'h{i}.ln2.b'])))
    x = layer_norm(x, p['ln_f.g'], p['ln_f.b'])
    return add(matmul(x, p['lm_head.w']), p['lm_head.b'])


####################################
# Teacher-forced scoring
####################################


def _check_pair(config: ModelConfig, x: Tokens, y: Tokens):
    if len(x) == 0:
        raise ModelInputError('Prompt should not be empty')
    if len(y) == 0:
        raise ModelInputError('Response should not be empty')
    if len(x) + len(y) > config.max_seq_len:
        raise ModelInputError(
            'Prompt ({}) plus response ({}) exceeds max_seq_len {}'.format(
                len(x), len(y), config.max_seq_len))


def response_logits_batch(model: LanguageModel, xs: Sequence[Tokens],
                          ys: Sequence[Tokens]) -> Tuple[Tensor, np.ndarray]:
    '''
    Teacher-forced logits scoring each response token.

    The model reads ``x + y[:-1]``; the logit row at ``|x| - 1 + t`` predicts ``y[t]``. Sequences
    are right-padded, which leaves earlier positions untouched under the causal mask.

    :returns: Logits of shape (B, max|y|, V) and a (B, max|y|) mask of real response positions
    '''
    if len(xs) != len(ys) or len(xs) == 0:
        raise ModelInputError(
            'Expected matching non-empty prompt/response lists, got {} and {}'.
            format(len(xs), len(ys)))
    for (x, y) in zip(xs, ys):
        _check_pair(model.config, x, y)

    seqs = [list(x) + list(y[:-1]) for (x, y) in zip(xs, ys)]
    width = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    for (b, s) in enumerate(seqs):
        tokens[b, :len(s)] = s

    y_len = max(len(y) for y in ys)
    rows = np.zeros((len(ys), y_len), dtype=np.int64)
    mask = np.zeros((len(ys), y_len))
    for (b, (x, y)) in enumerate(zip(xs, ys)):
        rows[b, :len(y)] = np.arange(len(x) - 1, len(x) + len(y) - 1)
        mask[b, :len(y)] = 1.0

    logits = forward(model, tokens)
    batch = np.arange(len(ys))[:, None]
    return (getitem(logits, (batch, rows)), mask)


def response_logits(model: LanguageModel, x: Tokens, y: Tokens) -> Tensor:
    '''
    :returns: Logits of shape (|y|, V) scoring each token of ``y`` given ``x`` and the preceding tokens
    '''
    (logits, _) = response_logits_batch(model, [x], [y])
    return reshape(logits, (len(y), model.config.vocab_size))


def pad_responses(ys: Sequence[Tokens]) -> np.ndarray:
    width = max(len(y) for y in ys)
    out = np.full((len(ys), width), PAD_ID, dtype=np.int64)
    for (b, y) in enumerate(ys):
        out[b, :len(y)] = y
    return out


def token_log_probs_batch(model: LanguageModel, xs: Sequence[Tokens],
                          ys: Sequence[Tokens]) -> Tuple[Tensor, np.ndarray]:
    '''
    :returns: ``log p(y_t | x, y_<t)`` of shape (B, max|y|), zero-masked past each response end, and the mask
    '''
    (logits, mask) = response_logits_batch(model, xs, ys)
    targets = pad_responses(ys)[:, :, None]
    lp = gather(log_softmax(logits), targets)
    lp = reshape(lp, mask.shape)
    return (mul(lp, mask), mask)


def sequence_log_prob_batch(model: LanguageModel, xs: Sequence[Tokens],
                            ys: Sequence[Tokens]) -> Tensor:
    '''
    :returns: Sequence-sum log-probabilities of shape (B,)
    '''
    (lp, _) = token_log_probs_batch(model, xs, ys)
    return reduce_sum(lp, axis=1)


def token_log_probs(model: LanguageModel, x: Tokens, y: Tokens) -> Tensor:
    logits = response_logits(model, x, y)
    lp = gather(log_softmax(logits), np.asarray(y, dtype=np.int64)[:, None])
    return reshape(lp, (len(y),))


def sequence_log_prob(model: LanguageModel, x: Tokens, y: Tokens) -> Tensor:
    '''
    :returns: Scalar ``sum_t log p(y_t | x, y_<t)``
    '''
    return reduce_sum(token_log_probs(model, x, y))


####################################
# Decoding
####################################


def next_token(logits: np.ndarray, temperature: float,
               rng: np.random.Generator) -> int:
    '''
    Draws one token from a logit row. Temperature 0 is argmax, ties to the lower id.
    '''
    if temperature == 0:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / temperature
    probs = np.exp(z - z.max())
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side='right'), len(cdf) - 1))


def sample(model: LanguageModel,
           x: Tokens,
           temperature: float,
           max_new: int,
           seed: int) -> List[int]:
    '''
    Ancestral sampling from ``x``. Stops after emitting EOS (included in the output), after
    ``max_new`` tokens, or when the sequence fills ``max_seq_len``.
    '''
    if temperature < 0:
        raise ModelInputError(
            'Temperature should be non-negative, but is {}'.format(temperature))
    if max_new < 1:
        raise ModelInputError('max_new should be at least 1, but is {}'.format(
            max_new))
    if len(x) == 0:
        raise ModelInputError('Prompt should not be empty')
    if len(x) >= model.config.max_seq_len:
        raise ModelInputError('Prompt of length {} leaves no room within max_seq_len {}'.format(
            len(x), model.config.max_seq_len))

    rng = np.random.default_rng(seed)
    seq = list(x)
    out = []
    with no_grad():
        while len(out) < max_new and len(seq) < model.config.max_seq_len:
            logits = forward(model, [seq]).data[0, -1]
            token = next_token(logits, temperature, rng)
            out.append(token)
            seq.append(token)
            if token == EOS_ID:
                break
    return out


def greedy_decode(model: LanguageModel,
                  x: Tokens,
                  max_new: Optional[int] = None) -> List[int]:
    max_new = max_new or model.config.max_seq_len
    return sample(model, x, 0.0, max_new, seed=0)
