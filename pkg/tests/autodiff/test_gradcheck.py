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

from proxy_kd.autodiff import GRADCHECK_TOLERANCE, Tensor, check_gradients, mul, \
    primitive_cases, reduce_sum, relative_error, run_gradient_suite
from proxy_kd.autodiff.gradcheck import GradientCase


class TestRelativeError:
    """Test the relative error measure."""

    def test_identical_is_zero(self):
        """Equal gradients give zero error."""
        g = np.array([1.0, 2.0])
        assert relative_error(g, g) == 0.0

    def test_zero_gradients_use_floor(self):
        """All-zero gradients do not divide by zero."""
        assert relative_error(np.zeros(3), np.full(3, 1e-12)) < 1e-5

    def test_opposite_is_one(self):
        """Opposite gradients give error 1."""
        g = np.array([1.0, -3.0])
        assert relative_error(g, -g) == pytest.approx(1.0)


class TestCheckGradients:
    """Test the finite-difference checker."""

    def test_correct_gradient_passes(self, float64):
        """x * x checks out."""
        x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
        errors = check_gradients(lambda: reduce_sum(mul(x, x)), {'x': x})
        assert errors['x'] < 1e-8

    def test_wrong_gradient_is_caught(self, float64):
        """A primitive with a broken backward is flagged."""
        from proxy_kd.autodiff.tensor import _inputs, _make

        def bad_square(x):
            (x,) = _inputs('bad_square', x)
            return _make('bad_square', x.data**2, (x,), lambda g: (g * x.data,))

        x = Tensor(np.array([0.5, 1.5]), requires_grad=True)
        errors = check_gradients(lambda: reduce_sum(bad_square(x)), {'x': x})
        assert errors['x'] > 0.1


class TestSuite:
    """Test the named gradient suite."""

    def test_all_primitives_pass(self):
        """Every primitive stays under the tolerance on random instances."""
        errors = run_gradient_suite(primitive_cases(), instances=3)
        assert set(errors) == {c.name for c in primitive_cases()}
        for (name, err) in errors.items():
            assert err < GRADCHECK_TOLERANCE, name

    def test_suite_runs_in_64_bit(self):
        """The suite switches to test mode and restores the previous mode."""
        seen = []

        def build(rng):
            x = Tensor(rng.standard_normal(2), requires_grad=True)
            seen.append(x.data.dtype)
            return (lambda: reduce_sum(mul(x, x)), {'x': x})

        run_gradient_suite([GradientCase('square', build)], instances=1)
        assert seen == [np.float64]
        assert Tensor([1.0]).data.dtype == np.float32
