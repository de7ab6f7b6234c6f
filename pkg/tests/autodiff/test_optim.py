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

import numpy as np
import pytest

from proxy_kd.autodiff import Adam, AdamState, MissingGradientError, ShapeError, Tape, Tensor, \
    adam_step, backward, mul, reduce_sum


def _param(value):
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


class TestAdam:
    """Test the Adam update."""

    def test_first_step_moves_by_learning_rate(self, float64):
        """Bias correction makes the first update lr * sign(g)."""
        p = _param([1.0, -1.0])
        p.grad = np.array([0.5, -2.0])
        state = AdamState(lr=0.1)
        adam_step({'p': p}, state)
        np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)
        assert state.step == 1

    def test_step_clears_gradients(self, float64):
        """Gradients are consumed by the update."""
        p = _param([1.0])
        p.grad = np.array([1.0])
        adam_step({'p': p}, AdamState())
        assert p.grad is None

    def test_missing_gradient_lists_names(self, float64):
        """Parameters without a gradient are named in sorted order."""
        (a, b, c) = (_param([1.0]), _param([1.0]), _param([1.0]))
        a.grad = np.array([1.0])
        with pytest.raises(MissingGradientError, match='b, c'):
            adam_step({'c': c, 'a': a, 'b': b}, AdamState())

    def test_moment_shape_mismatch(self, float64):
        """A state built for another shape is rejected."""
        p = _param([1.0, 2.0])
        p.grad = np.ones(2)
        state = AdamState()
        state.m['p'] = np.zeros(3)
        state.v['p'] = np.zeros(3)
        with pytest.raises(ShapeError):
            adam_step({'p': p}, state)

    def test_failed_step_changes_nothing(self, float64):
        """A rejected step leaves the counter, moments and parameters as they were."""
        (a, p) = (_param([1.0]), _param([1.0, 2.0]))
        a.grad = np.array([1.0])
        p.grad = np.ones(2)
        state = AdamState()
        state.m['p'] = np.zeros(3)
        state.v['p'] = np.zeros(3)
        with pytest.raises(ShapeError, match='"p"'):
            adam_step({'a': a, 'p': p}, state)
        assert state.step == 0
        assert 'a' not in state.m
        np.testing.assert_array_equal(a.data, [1.0])
        assert a.grad is not None

    def test_minimizes_quadratic(self, float64):
        """Repeated steps drive x^2 towards zero."""
        x = _param([5.0])
        optimizer = Adam({'x': x}, lr=0.1)
        for _ in range(500):
            with Tape():
                backward(reduce_sum(mul(x, x)))
            optimizer.step()
        assert abs(x.data[0]) < 0.5

    def test_zero_grad(self):
        """Adam.zero_grad clears every parameter."""
        p = _param([1.0])
        p.grad = np.ones(1)
        Adam({'p': p}).zero_grad()
        assert p.grad is None
