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

import abc
import hashlib
import logging
import os
import struct

import msgpack
import numpy as np

from proxy_kd.autodiff import Tensor
from .transformer import LanguageModel, ModelConfig

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'PKD1'
CHECKPOINT_VERSION = 1
CHECKPOINT_EXT = '.pkd'

DTYPES = {'float32': np.dtype('<f4'), 'float64': np.dtype('<f8')}


class CheckpointFormatError(ValueError):
    pass


def encode_checkpoint(model: LanguageModel) -> bytes:
    '''
    Serializes a model as PKD1: magic, version (u32), msgpack config block length (u32) and block,
    parameter count (u32), then per parameter its name (u16 length + utf-8), rank (u8),
    dims (u32 each) and raw little-endian values.
    '''
    dtype_name = next(iter(model.params.values())).data.dtype.name
    if dtype_name not in DTYPES:
        raise CheckpointFormatError(
            'Unsupported parameter dtype "{}"'.format(dtype_name))
    header = msgpack.packb(
        {
            'model': model.config.to_jsonable(),
            'role': model.role,
            'dtype': dtype_name
        },
        use_bin_type=True)

    parts = [
        CHECKPOINT_MAGIC,
        struct.pack('<II', CHECKPOINT_VERSION, len(header)), header,
        struct.pack('<I', len(model.params))
    ]
    for (name, p) in model.params.items():
        name_bytes = name.encode('utf-8')
        parts.append(struct.pack('<H', len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack('<B', p.ndim))
        parts.append(struct.pack('<{}I'.format(p.ndim), *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype=DTYPES[dtype_name]).tobytes())
    return b''.join(parts)


class _Reader():

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise CheckpointFormatError(
                'Checkpoint truncated at byte {}'.format(self._pos))
        chunk = self._data[self._pos:self._pos + n]
        self._pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self._data)


def decode_checkpoint(data: bytes) -> LanguageModel:
    reader = _Reader(data)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError('Not a PKD1 checkpoint (bad magic bytes)')
    (version, header_len) = reader.unpack('<II')
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            'Unsupported checkpoint version {}'.format(version))
    try:
        header = msgpack.unpackb(reader.take(header_len), raw=False)
        config = ModelConfig(**header['model'])
        dtype = DTYPES[header['dtype']]
        role = header['role']
    except (ValueError, KeyError, TypeError,
            msgpack.exceptions.ExtraData) as e:
        raise CheckpointFormatError('Invalid checkpoint config block: {}'.format(e))

    (n_params,) = reader.unpack('<I')
    params = {}
    for _ in range(n_params):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        (ndim,) = reader.unpack('<B')
        shape = reader.unpack('<{}I'.format(ndim))
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(reader.take(count * dtype.itemsize),
                               dtype=dtype).reshape(shape)
        params[name] = Tensor(values.copy(), requires_grad=True, name=name)
    if not reader.exhausted:
        raise CheckpointFormatError('Trailing bytes after last parameter')

    expected = LanguageModel(config, role=role).params
    if set(expected) != set(params) or any(
            expected[n].shape != params[n].shape for n in expected):
        raise CheckpointFormatError(
            'Checkpoint parameters do not match its model config')
    return LanguageModel(config, role=role, params=params)


def save_checkpoint(model: LanguageModel, path: str) -> str:
    data = encode_checkpoint(model)
    with open(path, 'wb') as f:
        f.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str) -> LanguageModel:
    with open(path, 'rb') as f:
        return decode_checkpoint(f.read())


def model_hash(model: LanguageModel) -> str:
    return hashlib.sha256(encode_checkpoint(model)).hexdigest()


class CheckpointStore(abc.ABC):
    '''
        Persistent store for model checkpoints.
    '''

    @abc.abstractmethod
    def save(self, model: LanguageModel) -> str:
        '''
            Persists a model, returning a unique ID for the checkpoint.
        '''
        raise NotImplementedError()

    @abc.abstractmethod
    def load(self, checkpoint_id: str) -> LanguageModel:
        '''
            Loads a persisted model, identified by ID.
        '''
        raise NotImplementedError()


class FileCheckpointStore(CheckpointStore):
    '''
       Stores checkpoints in the local filesystem, content-addressed by the SHA-256 of their bytes.
    '''

    def __init__(self, checkpoints_dir: str):
        self._checkpoints_dir = checkpoints_dir
        os.makedirs(checkpoints_dir, exist_ok=True)

    def path(self, checkpoint_id: str) -> str:
        return os.path.join(self._checkpoints_dir, checkpoint_id)

    def save(self, model: LanguageModel) -> str:
        data = encode_checkpoint(model)
        checkpoint_id = hashlib.sha256(data).hexdigest() + CHECKPOINT_EXT
        dest_file_path = self.path(checkpoint_id)
        if not os.path.exists(dest_file_path):
            with open(dest_file_path, 'wb') as f:
                f.write(data)
        return checkpoint_id

    def load(self, checkpoint_id: str) -> LanguageModel:
        with open(self.path(checkpoint_id), 'rb') as f:
            return decode_checkpoint(f.read())
