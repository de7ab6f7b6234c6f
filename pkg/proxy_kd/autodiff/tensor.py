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
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from proxy_kd import config

logger = logging.getLogger(__name__)

# Score given to future positions by the causal mask; exp() of it underflows to 0
MASK_VALUE = -1e9
LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class NonScalarLossError(ValueError):
    pass


class DetachedLossError(RuntimeError):
    pass


_precision = {
    'test_mode': config.TEST_MODE,
    'dtype': np.float64 if config.TEST_MODE else np.float32
}
_local = threading.local()


def set_test_mode(enabled: bool):
    '''
    Switches the global precision. Test mode computes in 64-bit and fails on non-finite
    inputs to any primitive; release mode computes in 32-bit and lets non-finite values propagate.
    '''
    _precision['test_mode'] = bool(enabled)
    _precision['dtype'] = np.float64 if enabled else np.float32


def is_test_mode() -> bool:
    return _precision['test_mode']


def get_dtype():
    return _precision['dtype']


@contextmanager
def test_mode(enabled: bool = True):
    previous = is_test_mode()
    set_test_mode(enabled)
    try:
        yield
    finally:
        set_test_mode(previous)


class Tensor():
    '''
    Dense array with an optional gradient slot.

    Tensors created by primitives while a :class:`Tape` is active, and from at least one
    input that requires grad, carry a reference to the tape node that produced them.
    '''

    def __init__(self,
                 data,
                 requires_grad: bool = False,
                 name: Optional[str] = None):
        self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        name = f', name={self.name}' if self.name else ''
        return f'Tensor(shape={self.shape}, requires_grad={self.requires_grad}{name})'

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)


TensorLike = Union[Tensor, np.ndarray, float, int]


class Node():
    '''
    One recorded primitive: its inputs, its output and the function mapping the output
    gradient to input gradients (activations it needs are captured in that closure).
    '''

    __slots__ = ('op', 'inputs', 'output', 'backward_fn', 'tape', 'index')

    def __init__(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable, tape: 'Tape', index: int):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape
        self.index = index


class Tape():
    '''
    Ordered record of primitives for one define-by-run step.

    Primitives are recorded only inside ``with Tape():`` and outside :func:`no_grad`. Since nodes
    are appended as they execute, every node's inputs precede it.
    '''

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self):
        return len(self.nodes)

    def reset(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc_value, tb):
        _tape_stack().pop()


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, 'tapes'):
        _local.tapes = []
        _local.no_grad = 0
    return _local.tapes


def _active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    if not stack or _local.no_grad > 0:
        return None
    return stack[-1]


@contextmanager
def no_grad():
    _tape_stack()
    _local.no_grad += 1
    try:
        yield
    finally:
        _local.no_grad -= 1


def backward(loss: Tensor):
    '''
    Populates ``grad`` on every leaf tensor with ``requires_grad`` reachable from ``loss``.
    Leaf gradients accumulate across calls until cleared.
    '''
    if loss.ndim != 0:
        raise NonScalarLossError(
            'backward: loss should be a scalar, but has shape {}'.format(
                loss.shape))

    node = loss._node
    if node is None:
        raise DetachedLossError(
            'backward: loss was not produced on an active tape')

    tape = node.tape
    grads = {id(loss): np.ones_like(loss.data)}
    for n in reversed(tape.nodes[:node.index + 1]):
        g = grads.pop(id(n.output), None)
        if g is None:
            continue

        input_grads = n.backward_fn(g)
        for (t, ig) in zip(n.inputs, input_grads):
            if ig is None or not t.requires_grad:
                continue
            if t.is_leaf:
                if t.grad is None:
                    t.grad = np.array(ig, dtype=t.data.dtype, copy=True)
                else:
                    t.grad += ig
            elif id(t) in grads:
                grads[id(t)] = grads[id(t)] + ig
            else:
                grads[id(t)] = ig


def zero_grad(tensors: Iterable[Tensor]):
    for t in tensors:
        t.grad = None


####################################
# Primitive plumbing
####################################


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _inputs(op: str, *xs: TensorLike) -> Tuple[Tensor, ...]:
    tensors = tuple(as_tensor(x) for x in xs)
    if is_test_mode():
        for t in tensors:
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteError(
                    '{}: non-finite value in input of shape {}'.format(
                        op, t.shape))
    return tensors


def _make(op: str, data: np.ndarray, inputs: Tuple[Tensor, ...],
          backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, inputs, out, backward_fn, tape, len(tape.nodes))
        out._node = node
        tape.nodes.append(node)
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError('{}: shapes {} and {} are not broadcastable'.format(
            op, a.shape, b.shape))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for (axis, dim) in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0, -x))


####################################
# Elementwise
####################################


def add(a: TensorLike, b: TensorLike) -> Tensor:
    (a, b) = _inputs('add', a, b)
    _broadcast_shape('add', a, b)

    def backward_fn(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make('add', a.data + b.data, (a, b), backward_fn)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    (a, b) = _inputs('sub', a, b)
    _broadcast_shape('sub', a, b)

    def backward_fn(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _make('sub', a.data - b.data, (a, b), backward_fn)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    (a, b) = _inputs('mul', a, b)
    _broadcast_shape('mul', a, b)

    def backward_fn(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _make('mul', a.data * b.data, (a, b), backward_fn)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    (a, b) = _inputs('div', a, b)
    _broadcast_shape('div', a, b)

    def backward_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make('div', a.data / b.data, (a, b), backward_fn)


def neg(x: TensorLike) -> Tensor:
    (x,) = _inputs('neg', x)
    return _make('neg', -x.data, (x,), lambda g: (-g,))


def exp(x: TensorLike) -> Tensor:
    (x,) = _inputs('exp', x)
    out = np.exp(x.data)
    return _make('exp', out, (x,), lambda g: (g * out,))


def log(x: TensorLike) -> Tensor:
    (x,) = _inputs('log', x)
    return _make('log', np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x: TensorLike) -> Tensor:
    (x,) = _inputs('sigmoid', x)
    out = _sigmoid_np(x.data)
    return _make('sigmoid', out, (x,), lambda g: (g * out * (1 - out),))


def log_sigmoid(x: TensorLike) -> Tensor:
    '''
    ``log(sigmoid(x))`` evaluated as ``-log(1 + exp(-x))`` without overflow.
    '''
    (x,) = _inputs('log_sigmoid', x)
    out = -np.logaddexp(0, -x.data)
    return _make('log_sigmoid', out, (x,),
                 lambda g: (g * _sigmoid_np(-x.data),))


def gelu(x: TensorLike) -> Tensor:
    # tanh approximation
    (x,) = _inputs('gelu', x)
    c = np.sqrt(2 / np.pi)
    inner = c * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1 + t)

    def backward_fn(g):
        d_inner = c * (1 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1 + t) + 0.5 * x.data * (1 - t * t) * d_inner),)

    return _make('gelu', out, (x,), backward_fn)


####################################
# Linear algebra & indexing
####################################


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    (a, b) = _inputs('matmul', a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            'matmul: inner dimensions do not match for shapes {} x {}'.format(
                a.shape, b.shape))
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(
            'matmul: batch dimensions of shapes {} x {} are not broadcastable'.
            format(a.shape, b.shape))

    def backward_fn(g):
        return (_unbroadcast(g @ _swap(b.data), a.shape),
                _unbroadcast(_swap(a.data) @ g, b.shape))

    return _make('matmul', a.data @ b.data, (a, b), backward_fn)


def embedding(weight: Tensor, ids) -> Tensor:
    '''
    Looks up rows of ``weight`` (V, D) for integer ``ids`` of any shape.
    '''
    (weight,) = _inputs('embedding', weight)
    ids = np.asarray(ids)
    if weight.ndim != 2:
        raise ShapeError('embedding: weight should be 2-D, but has shape {}'.
                         format(weight.shape))
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(
            'embedding: indices should be integers, got dtype {}'.format(
                ids.dtype))
    vocab_size = weight.shape[0]
    bad = np.argwhere((ids < 0) | (ids >= vocab_size))
    if len(bad) > 0:
        pos = tuple(int(i) for i in bad[0])
        raise ShapeError(
            'embedding: index {} at position {} outside vocabulary of size {}'.
            format(int(ids[pos]), pos, vocab_size))

    def backward_fn(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return _make('embedding', weight.data[ids], (weight,), backward_fn)


def gather(x: TensorLike, index) -> Tensor:
    '''
    Picks entries along the last axis: ``out[..., j] = x[..., index[..., j]]``.
    ``index`` has the leading shape of ``x`` and any trailing length.
    '''
    (x,) = _inputs('gather', x)
    index = np.asarray(index)
    if index.ndim != x.ndim or index.shape[:-1] != x.shape[:-1]:
        raise ShapeError(
            'gather: index of shape {} does not match input of shape {}'.format(
                index.shape, x.shape))
    if index.size and (index.min() < 0 or index.max() >= x.shape[-1]):
        raise ShapeError(
            'gather: index outside last axis of size {}'.format(x.shape[-1]))

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        grid = np.indices(index.shape)
        np.add.at(gx, tuple(grid[:-1]) + (index,), g)
        return (gx,)

    return _make('gather', np.take_along_axis(x.data, index, axis=-1), (x,),
                 backward_fn)


def getitem(x: TensorLike, index) -> Tensor:
    (x,) = _inputs('getitem', x)

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make('getitem', np.array(x.data[index]), (x,), backward_fn)


def reshape(x: TensorLike, shape: Sequence[int]) -> Tensor:
    (x,) = _inputs('reshape', x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError('reshape: cannot reshape {} into {}'.format(
            x.shape, tuple(shape)))
    return _make('reshape', out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: TensorLike, axes: Sequence[int]) -> Tensor:
    (x,) = _inputs('transpose', x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make('transpose', x.data.transpose(axes), (x,),
                 lambda g: (g.transpose(inverse),))


####################################
# Reductions
####################################


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def reduce_sum(x: TensorLike, axis=None, keepdims=False) -> Tensor:
    (x,) = _inputs('sum', x)
    return _make('sum', x.data.sum(axis=axis, keepdims=keepdims), (x,),
                 lambda g: (_expand_reduced(g, x.shape, axis, keepdims),))


def reduce_mean(x: TensorLike, axis=None, keepdims=False) -> Tensor:
    (x,) = _inputs('mean', x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size // max(out.size, 1) if x.size else 1
    return _make(
        'mean', out, (x,),
        lambda g: (_expand_reduced(g, x.shape, axis, keepdims) / count,))


####################################
# Normalization & attention
####################################


def softmax(x: TensorLike) -> Tensor:
    '''
    Softmax over the last axis, with max-subtraction.
    '''
    (x,) = _inputs('softmax', x)
    if x.ndim == 0:
        raise ShapeError('softmax: input should have at least one axis')
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make('softmax', out, (x,), backward_fn)


def log_softmax(x: TensorLike) -> Tensor:
    '''
    Log-softmax over the last axis, with max-subtraction.
    '''
    (x,) = _inputs('log_softmax', x)
    if x.ndim == 0:
        raise ShapeError('log_softmax: input should have at least one axis')
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make('log_softmax', out, (x,), backward_fn)


def layer_norm(x: TensorLike,
               gamma: TensorLike,
               beta: TensorLike,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    (x, gamma, beta) = _inputs('layer_norm', x, gamma, beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            'layer_norm: gain {} and bias {} should both have shape ({},)'.
            format(gamma.shape, beta.shape, n))

    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward_fn(g):
        g_gamma = (g * xhat).reshape(-1, n).sum(axis=0)
        g_beta = g.reshape(-1, n).sum(axis=0)
        dxhat = g * gamma.data
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True) -
                            xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return (dx, g_gamma, g_beta)

    return _make('layer_norm', out, (x, gamma, beta), backward_fn)


def causal_attention_scores(q: TensorLike, k: TensorLike,
                            scale: float) -> Tensor:
    '''
    Scaled dot-product scores ``q @ k^T * scale`` over (..., T, d) inputs, with every
    score of a query at position i on a key at position j > i replaced by ``MASK_VALUE``.
    '''
    (q, k) = _inputs('attention_scores', q, k)
    if q.ndim < 2 or q.shape != k.shape:
        raise ShapeError(
            'attention_scores: query {} and key {} should share a (..., T, d) shape'
            .format(q.shape, k.shape))
    t = q.shape[-2]
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    out = np.where(mask, MASK_VALUE, (q.data @ _swap(k.data)) * scale)

    def backward_fn(g):
        gm = np.where(mask, 0, g) * scale
        return (gm @ k.data, _swap(gm) @ q.data)

    return _make('attention_scores', out, (q, k), backward_fn)
