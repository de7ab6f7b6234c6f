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

import pytest

from proxy_kd.eval import MetricLog, MetricLogger
from proxy_kd.losses import nll_loss_batch
from proxy_kd.pipeline import epoch_batches, iterate_batches, steps_per_epoch, train_steps
from tests.helpers import assert_params_equal, params_differ


class TestBatching:
    """Test seeded batch order."""

    def test_epoch_covers_every_example_once(self, copy_examples):
        batches = epoch_batches(copy_examples, 4, seed=0, epoch=0)
        assert [len(b) for b in batches] == [4, 2]
        assert sorted(e.id for b in batches for e in b) == sorted(e.id for e in copy_examples)

    def test_order_depends_on_seed_and_epoch(self, copy_examples):
        def ids(seed, epoch):
            return [e.id for b in epoch_batches(copy_examples, 6, seed, epoch) for e in b]

        assert ids(1, 0) == ids(1, 0)
        assert len({tuple(ids(s, e)) for s in range(3) for e in range(3)}) > 1

    def test_iterate_crosses_epochs(self, copy_examples):
        batches = iterate_batches(copy_examples, 6, seed=0)
        assert [len(next(batches)) for _ in range(3)] == [6, 6, 6]

    def test_empty(self):
        with pytest.raises(ValueError, match='empty'):
            next(iterate_batches([], 2, seed=0))

    def test_steps_per_epoch_rounds_up(self):
        assert steps_per_epoch(10, 4) == 3
        assert steps_per_epoch(8, 4) == 2


class TestTrainSteps:
    """Test the training loop."""

    def test_deterministic(self, make_model, copy_examples):
        """Equal seeds and starting points give equal parameters."""
        models = [make_model(seed=3), make_model(seed=3)]
        for model in models:
            train_steps(model, copy_examples, lambda b, m=model: nll_loss_batch(m, b), 5, 2,
                        seed=9, lr=1e-2)
        assert_params_equal(*models)

    def test_loss_decreases(self, make_model, copy_examples):
        model = make_model()
        losses = train_steps(model, copy_examples, lambda b: nll_loss_batch(model, b), 60, 6,
                             seed=0, lr=1e-2)
        assert len(losses) == 60
        assert losses[-1] < losses[0]

    def test_logs_every_step(self, make_model, copy_examples):
        model = make_model()
        log = MetricLog()
        seen = []
        train_steps(model, copy_examples, lambda b: nll_loss_batch(model, b), 3, 2, seed=0,
                    metric_logger=MetricLogger('warmup', log), on_step=seen.append)
        assert seen == [1, 2, 3]
        assert [r.step for r in log.records] == [1, 2, 3]
        assert {r.metric for r in log.records} == {'loss'}

    def test_zero_steps_changes_nothing(self, make_model, copy_examples):
        model = make_model()
        before = model.copy()
        assert train_steps(model, copy_examples, lambda b: nll_loss_batch(model, b), 0, 2,
                           seed=0) == []
        assert not params_differ(model, before)
