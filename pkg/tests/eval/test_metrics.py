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

from proxy_kd.blackbox import ProgrammaticTeacher
from proxy_kd.constants import TEST_SEED_OFFSET
from proxy_kd.corpus import generate_task_corpus
from proxy_kd.eval import TrainTestOverlapError, check_disjoint, match_ratio, \
    match_ratio_from_logits, task_accuracy
from proxy_kd.pipeline import label_corpus


def _one_hot_rows(tokens, vocab=5):
    rows = np.zeros((len(tokens), vocab))
    rows[np.arange(len(tokens)), tokens] = 1.0
    return rows


class TestMatchRatio:
    """Test the top-1 agreement diagnostic."""

    def test_seven_of_ten(self):
        """A fixture with 7 of 10 positions forced to match gives 0.7."""
        ys = [[1, 2, 3, 4], [0, 1, 2], [4, 4, 4]]
        predicted = [[1, 2, 3, 0], [0, 3, 2], [4, 4, 1]]
        logits = [_one_hot_rows(p) for p in predicted]
        assert match_ratio_from_logits(logits, ys) == pytest.approx(0.7)

    def test_ties_go_to_lowest_id(self):
        rows = np.array([[1.0, 1.0, 0.0]])
        assert match_ratio_from_logits([rows], [[0]]) == 1.0
        assert match_ratio_from_logits([rows], [[1]]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match='positions'):
            match_ratio_from_logits([_one_hot_rows([1, 2])], [[1]])

    def test_empty(self):
        with pytest.raises(ValueError):
            match_ratio_from_logits([], [])

    def test_model_agrees_with_its_own_greedy_decode(self, make_model, copy_examples):
        """Responses greedily decoded by the model match its top-1 tokens everywhere."""
        model = make_model()
        relabeled = [e.with_response(model.greedy_decode(e.x, max_new=3)) for e in copy_examples]
        assert match_ratio(model, relabeled, threads=2) == 1.0


class TestTaskAccuracy:
    """Test exact-match test accuracy."""

    def test_overlap_is_an_error(self, make_model, copy_spec, copy_examples):
        with pytest.raises(TrainTestOverlapError) as info:
            task_accuracy(make_model(), copy_examples, copy_spec,
                          training_ids=['copy-3', 'copy-1', 'other'])
        assert info.value.offenders == ['copy-1', 'copy-3']

    def test_check_disjoint_passes(self, copy_examples):
        check_disjoint(copy_examples, ['x', 'y'])

    def test_untrained_model_is_in_range(self, make_model, copy_spec):
        testset = label_corpus(generate_task_corpus(copy_spec, 6, seed=TEST_SEED_OFFSET),
                               ProgrammaticTeacher(copy_spec), 0)
        accuracy = task_accuracy(make_model(), testset, copy_spec, threads=2)
        assert 0.0 <= accuracy <= 1.0

    def test_empty(self, make_model, copy_spec):
        with pytest.raises(ValueError, match='non-empty'):
            task_accuracy(make_model(), [], copy_spec)
