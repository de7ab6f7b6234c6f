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

from proxy_kd.blackbox import ProgrammaticTeacher, build_logit_cache
from proxy_kd.constants import EOS_ID, TEST_SEED_OFFSET, RunMode
from proxy_kd.corpus import Example, SplitError, generate_task_corpus, ground_truth
from proxy_kd.eval import MetricLog, MetricLogger, SplitTag
from proxy_kd.losses import WeightStats, compute_weight_stats
from proxy_kd.pipeline import AlignmentSchedule, ModeResourceError, TeacherQualityError, \
    align_proxy, distill_student, label_corpus, relabel_with_model, sample_pairs, \
    train_teacher, warmup_proxy
from tests.helpers import assert_params_equal, params_differ


@pytest.fixture
def testset(copy_spec):
    teacher = ProgrammaticTeacher(copy_spec)
    return label_corpus(generate_task_corpus(copy_spec, 5, seed=TEST_SEED_OFFSET), teacher, 0)


class TestTrainTeacher:
    """Test transformer teacher training and its quality gate."""

    def test_returns_accuracy(self, make_model, copy_spec, testset):
        log = MetricLog()
        accuracy = train_teacher(make_model(role='teacher'), copy_spec, testset, train_size=12,
                                 steps=3, batch_size=4, lr=1e-3, seed=0, min_accuracy=0.0,
                                 metric_logger=MetricLogger('teacher', log))
        assert 0.0 <= accuracy <= 1.0
        assert [r.value for r in log.records if r.metric == 'accuracy'] == [accuracy]

    def test_gate(self, make_model, copy_spec, testset):
        """An untrained teacher cannot pass a perfect-accuracy gate."""
        with pytest.raises(TeacherQualityError, match='teacher_steps'):
            train_teacher(make_model(role='teacher'), copy_spec, testset, train_size=12, steps=0,
                          batch_size=4, lr=1e-3, seed=0, min_accuracy=1.0)


class TestLabelCorpus:

    def test_programmatic_labels_are_ground_truth(self, copy_spec):
        prompts = generate_task_corpus(copy_spec, 8, seed=1)
        labeled = label_corpus(prompts, ProgrammaticTeacher(copy_spec), seed=0, threads=2)
        assert [e.id for e in labeled] == [e.id for e in prompts]
        assert all(e.y == ground_truth(copy_spec, e.x) for e in labeled)


class TestWarmup:
    """Test proxy warm-up on d_w."""

    def test_zero_epochs(self, make_model, copy_examples):
        proxy = make_model(role='proxy')
        before = proxy.copy()
        assert warmup_proxy(proxy, copy_examples, epochs=0) == []
        assert_params_equal(proxy, before)

    def test_epochs_set_step_count(self, make_model, copy_examples):
        """Two epochs over six examples in batches of four take four steps."""
        proxy = make_model(role='proxy')
        losses = warmup_proxy(proxy, copy_examples, epochs=2, batch_size=4, lr=1e-2)
        assert len(losses) == 4
        assert params_differ(proxy, make_model(role='proxy'))

    def test_empty(self, make_model):
        with pytest.raises(SplitError, match='d_w'):
            warmup_proxy(make_model(), [])

    def test_overlong_examples_are_skipped(self, make_model, copy_examples):
        """An example past the proxy context is left out instead of failing the stage."""
        long = Example('copy-long', [1] * 17, [5] * 15 + [2], 'copy')
        (a, b) = (make_model(role='proxy'), make_model(role='proxy'))
        warmup_proxy(a, copy_examples + [long], epochs=1, batch_size=6, lr=1e-2)
        warmup_proxy(b, copy_examples, epochs=1, batch_size=6, lr=1e-2)
        assert_params_equal(a, b)


class TestAlignmentSchedule:

    def test_validation(self):
        with pytest.raises(ValueError, match='pairs_per_prompt'):
            AlignmentSchedule(pairs_per_prompt=0)
        with pytest.raises(ValueError, match='`k`'):
            AlignmentSchedule(k=-1)


class TestSamplePairs:
    """Test preference pair sampling."""

    def test_repeats_examples_per_pair(self, make_model, copy_examples):
        schedule = AlignmentSchedule(k=1, pairs_per_prompt=3)
        (examples, pairs) = sample_pairs(make_model(), copy_examples[:2], schedule, seed=0,
                                         iteration=1)
        assert [e.id for e in examples] == ['copy-0'] * 3 + ['copy-1'] * 3
        assert len(pairs) == 6
        for (e, p) in zip(examples, pairs):
            if p is not None:
                assert (p.x, p.y_teacher) == (e.x, e.y)

    def test_seeded_by_iteration(self, make_model, copy_examples):
        schedule = AlignmentSchedule(k=1, temperature=1.0)
        model = make_model()
        draw = lambda it: sample_pairs(model, copy_examples, schedule, 0, it)[1]
        assert draw(1) == draw(1)

    def test_sample_equal_to_teacher_is_skipped(self, make_model, copy_examples):
        """A proxy sample reproducing the teacher response yields no pair."""
        model = make_model()
        schedule = AlignmentSchedule(k=1, temperature=0.0)
        greedy = model.greedy_decode(copy_examples[0].x,
                                     max_new=model.config.max_seq_len - len(copy_examples[0].x))
        e = copy_examples[0].with_response(greedy)
        (_, pairs) = sample_pairs(model, [e], schedule, seed=0, iteration=1)
        assert pairs == [None]


class TestAlignProxy:
    """Test iterative proxy alignment."""

    def test_k_zero_is_a_no_op(self, make_model, copy_examples):
        proxy = make_model(role='proxy')
        before = proxy.copy()
        log = align_proxy(proxy, None, copy_examples, AlignmentSchedule(k=0))
        assert log.iterations == [] and log.total_steps == 0
        assert_params_equal(proxy, before)

    def test_iterations_make_full_passes(self, make_model, copy_examples):
        """Each iteration takes one pass over d_p and logs its mean losses."""
        proxy = make_model(role='proxy')
        schedule = AlignmentSchedule(k=2, convergence_eps=0.0)
        metrics = MetricLog()
        log = align_proxy(proxy, None, copy_examples, schedule, batch_size=4, lr=1e-2,
                          metric_logger=MetricLogger('align', metrics))
        assert [it.steps for it in log.iterations] == [2, 2]
        assert log.total_steps == 4 and not log.converged
        for it in log.iterations:
            assert it.nll > 0
            if it.skipped_pairs < len(copy_examples):
                assert it.dpo is not None and it.margin is not None
        assert {r.step for r in metrics.records} == {1, 2, 3, 4}
        assert params_differ(proxy, make_model(role='proxy'))

    def test_deterministic(self, make_model, copy_examples):
        schedule = AlignmentSchedule(k=2)
        proxies = [make_model(role='proxy'), make_model(role='proxy')]
        logs = [align_proxy(p, None, copy_examples, schedule, batch_size=3, lr=1e-2, seed=5)
                for p in proxies]
        assert_params_equal(*proxies)
        assert logs[0] == logs[1]

    def test_without_preference(self, make_model, copy_examples):
        """The no-preference variant trains on NLL alone."""
        log = align_proxy(make_model(role='proxy'), None, copy_examples,
                          AlignmentSchedule(k=1, use_preference=False), batch_size=6)
        (it,) = log.iterations
        assert it.dpo is None and it.margin is None and it.skipped_pairs == 0

    def test_unlabeled_examples_are_labeled(self, make_model, copy_spec):
        prompts = generate_task_corpus(copy_spec, 4, seed=2)
        log = align_proxy(make_model(role='proxy'), ProgrammaticTeacher(copy_spec), prompts,
                          AlignmentSchedule(k=1), batch_size=4)
        assert log.total_steps == 1

    def test_unlabeled_without_teacher(self, make_model, copy_spec):
        prompts = generate_task_corpus(copy_spec, 4, seed=2)
        with pytest.raises(ValueError, match='no teacher response'):
            align_proxy(make_model(role='proxy'), None, prompts, AlignmentSchedule(k=1))

    def test_held_out_margin(self, make_model, copy_examples, testset):
        """The held-out margin is kept in the log and recorded under the held_out split."""
        metrics = MetricLog()
        log = align_proxy(make_model(role='proxy'), None, copy_examples,
                          AlignmentSchedule(k=1, temperature=2.0), batch_size=6,
                          metric_logger=MetricLogger('align', metrics), held_out=testset)
        (it,) = log.iterations
        assert isinstance(it.held_out_margin, float)
        (record,) = [r for r in metrics.records if r.split == SplitTag.HELD_OUT]
        assert record.metric == 'held_out_margin'
        assert record.step == log.total_steps
        assert record.value == pytest.approx(it.held_out_margin)

    def test_overlong_examples_are_skipped(self, make_model, copy_examples):
        """An example past the proxy context leaves alignment unchanged."""
        long = Example('copy-long', [1] * 17, [5] * 15 + [2], 'copy')
        schedule = AlignmentSchedule(k=1, temperature=2.0)
        (a, b) = (make_model(role='proxy'), make_model(role='proxy'))
        logs = [align_proxy(p, None, d_p, schedule, batch_size=6, lr=1e-2)
                for (p, d_p) in ((a, copy_examples + [long]), (b, copy_examples))]
        assert_params_equal(a, b)
        assert logs[0] == logs[1]
        with pytest.raises(SplitError, match='max_seq_len'):
            align_proxy(make_model(role='proxy'), None, [long], schedule)

    def test_converges_early(self, make_model, copy_examples):
        """A loose threshold stops alignment before k iterations."""
        schedule = AlignmentSchedule(k=50, convergence_eps=1e6, convergence_window=1,
                                     use_preference=False)
        log = align_proxy(make_model(role='proxy'), None, copy_examples, schedule, batch_size=6)
        assert log.converged
        assert log.total_steps == 2


class TestDistillStudent:
    """Test student distillation across modes."""

    @pytest.fixture
    def resources(self, make_model, copy_examples):
        proxy = make_model(role='proxy', seed=7).freeze()
        (cache, _) = build_logit_cache(proxy, copy_examples, k=4)
        return (proxy, cache, compute_weight_stats(proxy, copy_examples))

    def _distill(self, student, copy_examples, source, stats, mode, alpha=100.0, steps=3, **kw):
        return distill_student(student, copy_examples, source, stats, mode, alpha, steps,
                               batch_size=2, lr=1e-2, seed=1, **kw)

    def test_alpha_zero_equals_vanilla(self, make_model, copy_examples, resources):
        """proxy_kd at alpha 0 takes the same steps as vanilla_blackbox."""
        (_, cache, stats) = resources
        (a, b) = (make_model(), make_model())
        self._distill(a, copy_examples, cache, stats, RunMode.PROXY_KD, alpha=0.0)
        self._distill(b, copy_examples, None, None, RunMode.VANILLA_BLACKBOX)
        assert_params_equal(a, b)

    def test_unit_weights_equal_no_weight(self, make_model, copy_examples, resources):
        """proxy_kd with all weights 1.0 is proxy_kd_no_weight."""
        (_, cache, stats) = resources
        (a, b) = (make_model(), make_model())
        ones = WeightStats.unit([e.id for e in copy_examples])
        self._distill(a, copy_examples, cache, ones, RunMode.PROXY_KD)
        self._distill(b, copy_examples, cache, stats, RunMode.PROXY_KD_NO_WEIGHT)
        assert_params_equal(a, b)

    def test_weights_matter(self, make_model, copy_examples, resources):
        (_, cache, stats) = resources
        (a, b) = (make_model(), make_model())
        self._distill(a, copy_examples, cache, stats, RunMode.PROXY_KD)
        self._distill(b, copy_examples, cache, stats, RunMode.PROXY_KD_NO_WEIGHT)
        assert params_differ(a, b)

    def test_white_box_relabels(self, make_model, copy_examples, resources):
        (proxy, _, _) = resources
        relabeled = relabel_with_model(proxy, copy_examples)
        assert all(e.y[-1] == EOS_ID for e in relabeled)
        result = self._distill(make_model(), copy_examples, proxy, None, RunMode.WHITE_BOX_FKL)
        assert len(result.losses) == 3

    def test_white_box_needs_model(self, make_model, copy_examples, resources):
        (_, cache, stats) = resources
        with pytest.raises(ModeResourceError, match='white-box model'):
            self._distill(make_model(), copy_examples, cache, stats, RunMode.WHITE_BOX_FKL)

    def test_weighted_mode_needs_stats(self, make_model, copy_examples, resources):
        (_, cache, _) = resources
        with pytest.raises(ModeResourceError, match='weight statistics'):
            self._distill(make_model(), copy_examples, cache, None, RunMode.PROXY_KD)

    def test_cache_must_cover_d_s(self, make_model, copy_examples, resources):
        """Missing cache entries are caught before the first step."""
        (proxy, _, stats) = resources
        (partial, _) = build_logit_cache(proxy, copy_examples[:3], k=4)
        student = make_model()
        before = student.copy()
        with pytest.raises(ModeResourceError, match='lacks 3 example'):
            self._distill(student, copy_examples, partial, stats, RunMode.PROXY_KD)
        assert_params_equal(student, before)

    def test_unknown_mode(self, make_model, copy_examples):
        with pytest.raises(ModeResourceError, match='Unknown mode'):
            self._distill(make_model(), copy_examples, None, None, 'distill_harder')

    def test_evaluation_schedule(self, make_model, copy_examples, copy_spec, testset, resources):
        """Accuracy is recorded at multiples of eval_every and after the last step."""
        (_, cache, stats) = resources
        result = self._distill(make_model(), copy_examples, cache, stats, RunMode.PROXY_KD,
                               steps=5, testset=testset, spec=copy_spec, eval_every=2)
        assert [s for (s, _) in result.curve] == [2, 4, 5]
        assert result.final_accuracy == result.curve[-1][1]

    def test_zero_steps_evaluates_once(self, make_model, copy_examples, copy_spec, testset,
                                       resources):
        (_, cache, stats) = resources
        result = self._distill(make_model(), copy_examples, cache, stats, RunMode.PROXY_KD,
                               steps=0, testset=testset, spec=copy_spec)
        assert result.losses == [] and [s for (s, _) in result.curve] == [0]

    def test_empty_d_s(self, make_model):
        with pytest.raises(SplitError):
            distill_student(make_model(), [], None, None, RunMode.VANILLA_BLACKBOX, 0.0, 1)

    def test_weighted_mode_with_overlong_example(self, make_model, copy_examples):
        """Cache, weights and distillation all skip the same over-length example of d_s."""
        long = Example('copy-long', [1] * 17, [5] * 15 + [2], 'copy')
        d_s = copy_examples + [long]
        proxy = make_model(role='proxy', seed=7).freeze()
        (cache, skipped) = build_logit_cache(proxy, d_s, k=4)
        stats = compute_weight_stats(proxy, d_s)
        assert skipped == stats.skipped == ['copy-long']
        (a, b) = (make_model(), make_model())
        self._distill(a, d_s, cache, stats, RunMode.PROXY_KD)
        self._distill(b, copy_examples, cache, stats, RunMode.PROXY_KD)
        assert_params_equal(a, b)
