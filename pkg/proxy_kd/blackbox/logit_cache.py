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
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from proxy_kd.autodiff import no_grad
from proxy_kd.corpus import Example, drop_overlong
from proxy_kd.model import LanguageModel, model_hash, response_logits
from proxy_kd.utils.parallel import ordered_map

logger = logging.getLogger(__name__)

CACHE_MAGIC = b'PKDC'
CACHE_VERSION = 1
DEFAULT_TOP_K = 10
COVERAGE_THRESHOLD = 0.95
COVERAGE_TOLERANCE = 1e-9

_DTYPE_CODES = {4: np.dtype('<f4'), 8: np.dtype('<f8')}


class LogitCacheFormatError(ValueError):
    pass


class MissingCacheEntryError(KeyError):

    def __str__(self):
        return str(self.args[0]) if self.args else ''


@dataclass(frozen=True, eq=False)
class LogitCacheEntry():
    '''
    The proxy's K highest raw logits at one response position, descending, with their token ids.
    '''
    example_id: str
    t: int
    ids: np.ndarray
    logits: np.ndarray

    @property
    def k(self) -> int:
        return len(self.ids)

    def __eq__(self, other):
        return isinstance(other, LogitCacheEntry) and \
            (self.example_id, self.t) == (other.example_id, other.t) and \
            np.array_equal(self.ids, other.ids) and \
            self.logits.dtype == other.logits.dtype and \
            self.logits.tobytes() == other.logits.tobytes()


class LogitCacheFile():
    '''
    Top-K cache for a set of examples: per example a (T, K) id matrix and a (T, K) logit matrix,
    rows in response order.
    '''

    def __init__(self, k: int, vocab_size: int, model_hash: str,
                 examples: Dict[str, Tuple[np.ndarray, np.ndarray]]):
        self.k = k
        self.vocab_size = vocab_size
        self.model_hash = model_hash
        self._examples = examples

    def __len__(self):
        return len(self._examples)

    def __contains__(self, example_id: str):
        return example_id in self._examples

    @property
    def example_ids(self) -> List[str]:
        return list(self._examples)

    @property
    def dtype(self) -> np.dtype:
        for (_, logits) in self._examples.values():
            return logits.dtype
        return np.dtype('<f4')

    def arrays(self, example_id: str) -> Tuple[np.ndarray, np.ndarray]:
        if example_id not in self._examples:
            raise MissingCacheEntryError(
                'No logit cache entry for example "{}"'.format(example_id))
        return self._examples[example_id]

    def entries(self, example_id: str) -> List[LogitCacheEntry]:
        (ids, logits) = self.arrays(example_id)
        return [
            LogitCacheEntry(example_id, t, ids[t], logits[t])
            for t in range(len(ids))
        ]

    def __iter__(self) -> Iterable[LogitCacheEntry]:
        for example_id in self._examples:
            yield from self.entries(example_id)

    def __eq__(self, other):
        if not isinstance(other, LogitCacheFile):
            return False
        if (self.k, self.vocab_size, self.model_hash, self.example_ids) != \
                (other.k, other.vocab_size, other.model_hash, other.example_ids):
            return False
        for (example_id, (ids, logits)) in self._examples.items():
            (other_ids, other_logits) = other._examples[example_id]
            if not np.array_equal(ids, other_ids) or \
                    logits.dtype != other_logits.dtype or \
                    logits.tobytes() != other_logits.tobytes():
                return False
        return True


def top_k(logits: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    '''
    Row-wise top-K of a (T, V) logit matrix, descending, ties broken by lower token id.
    '''
    order = np.argsort(-logits, axis=-1, kind='stable')[:, :k]
    return (order.astype(np.int32), np.take_along_axis(logits, order, axis=-1))


def build_logit_cache(proxy: LanguageModel,
                      examples: Sequence[Example],
                      k: int = DEFAULT_TOP_K,
                      threads: int = 1,
                      progress: bool = False) -> Tuple[LogitCacheFile, List[str]]:
    '''
    Runs the proxy teacher-forced over every example and keeps the top-K logits per response position.

    :returns: The cache, in example id order, and the ids skipped for exceeding the proxy context
    '''
    if not 1 <= k <= proxy.config.vocab_size:
        raise LogitCacheFormatError(
            'K should be in [1, vocab_size={}], but is {}'.format(
                proxy.config.vocab_size, k))

    ordered = sorted(examples, key=lambda e: e.id)
    (kept, skipped) = drop_overlong(ordered, proxy.config.max_seq_len, 'the logit cache')

    def cache_one(e: Example):
        with no_grad():
            logits = response_logits(proxy, e.x, e.y).data
        return top_k(logits, k)

    items = kept if not progress else tqdm(kept, desc='logit cache', unit='ex')
    results = ordered_map(cache_one, items, threads=threads)
    cache = LogitCacheFile(k, proxy.config.vocab_size, model_hash(proxy),
                           {e.id: r for (e, r) in zip(kept, results)})
    logger.info('Cached top-{} logits for {} examples ({} skipped)'.format(
        k, len(kept), len(skipped)))
    return (cache, skipped)


def write_skipped_manifest(skipped: Sequence[str], path: str):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump({'skipped_ids': list(skipped)}, f, indent=2)


####################################
# Binary format
####################################


def encode_logit_cache(cache: LogitCacheFile) -> bytes:
    '''
    PKDC layout: magic, version (u32), K (u32), vocab size (u32), logit width in bytes (u8),
    proxy checkpoint SHA-256 (32 bytes), example count (u32); then per example its id
    (u16 length + utf-8), position count T (u32), T*K int32 ids and T*K logits, little-endian.
    '''
    dtype = np.dtype(cache.dtype).newbyteorder('<')
    if dtype.itemsize not in _DTYPE_CODES:
        raise LogitCacheFormatError('Unsupported logit dtype {}'.format(dtype))
    parts = [
        CACHE_MAGIC,
        struct.pack('<IIIB', CACHE_VERSION, cache.k, cache.vocab_size,
                    dtype.itemsize),
        bytes.fromhex(cache.model_hash),
        struct.pack('<I', len(cache))
    ]
    for example_id in cache.example_ids:
        (ids, logits) = cache.arrays(example_id)
        id_bytes = example_id.encode('utf-8')
        parts.append(struct.pack('<H', len(id_bytes)))
        parts.append(id_bytes)
        parts.append(struct.pack('<I', len(ids)))
        parts.append(np.ascontiguousarray(ids, dtype='<i4').tobytes())
        parts.append(np.ascontiguousarray(logits, dtype=dtype).tobytes())
    return b''.join(parts)


def decode_logit_cache(data: bytes) -> LogitCacheFile:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise LogitCacheFormatError(
                'Logit cache truncated at byte {}'.format(pos))
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CACHE_MAGIC:
        raise LogitCacheFormatError('Not a PKDC logit cache (bad magic bytes)')
    (version, k, vocab_size, width) = struct.unpack('<IIIB', take(13))
    if version != CACHE_VERSION:
        raise LogitCacheFormatError(
            'Unsupported logit cache version {}'.format(version))
    if width not in _DTYPE_CODES:
        raise LogitCacheFormatError('Unsupported logit width {}'.format(width))
    dtype = _DTYPE_CODES[width]
    model_hash_hex = bytes(take(32)).hex()
    (n_examples,) = struct.unpack('<I', take(4))

    examples = {}
    for _ in range(n_examples):
        (id_len,) = struct.unpack('<H', take(2))
        example_id = bytes(take(id_len)).decode('utf-8')
        (t,) = struct.unpack('<I', take(4))
        ids = np.frombuffer(take(4 * t * k), dtype='<i4').reshape(t, k).copy()
        logits = np.frombuffer(take(width * t * k),
                               dtype=dtype).reshape(t, k).copy()
        if example_id in examples:
            raise LogitCacheFormatError(
                'Duplicate example "{}" in logit cache'.format(example_id))
        examples[example_id] = (ids, logits)
    if pos != len(view):
        raise LogitCacheFormatError('Trailing bytes after last example')
    return LogitCacheFile(k, vocab_size, model_hash_hex, examples)


def write_logit_cache(cache: LogitCacheFile, path: str):
    with open(path, 'wb') as f:
        f.write(encode_logit_cache(cache))


def read_logit_cache(path: str) -> LogitCacheFile:
    with open(path, 'rb') as f:
        return decode_logit_cache(f.read())


####################################
# Coverage
####################################


def coverage_from_probs(probs: np.ndarray,
                        k_list: Sequence[int],
                        threshold: float = COVERAGE_THRESHOLD) -> Dict[int, float]:
    '''
    :param probs: (N, V) next-token distributions, one per position
    :returns: Percentage of positions whose top-K probability mass reaches ``threshold``, per K
    '''
    if len(probs) == 0:
        raise ValueError('Coverage needs at least one position')
    if list(k_list) != sorted(k_list) or any(k < 1 for k in k_list):
        raise ValueError('K list should be ascending positive ints, got {}'.format(
            list(k_list)))
    mass = np.cumsum(-np.sort(-np.asarray(probs, dtype=np.float64), axis=-1),
                     axis=-1)
    v = mass.shape[-1]
    return {
        int(k): float(
            100.0 * np.mean(mass[:, min(k, v) - 1] >= threshold - COVERAGE_TOLERANCE))
        for k in k_list
    }


def topk_coverage(model: LanguageModel,
                  examples: Sequence[Example],
                  k_list: Sequence[int],
                  threshold: float = COVERAGE_THRESHOLD) -> Dict[int, float]:
    if len(examples) == 0:
        raise ValueError('Coverage needs a non-empty example set')
    rows = []
    with no_grad():
        for e in examples:
            logits = response_logits(model, e.x, e.y).data.astype(np.float64)
            z = np.exp(logits - logits.max(axis=-1, keepdims=True))
            rows.append(z / z.sum(axis=-1, keepdims=True))
    return coverage_from_probs(np.concatenate(rows), k_list, threshold)
