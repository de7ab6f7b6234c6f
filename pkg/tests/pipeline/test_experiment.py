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
import os

import pytest

from proxy_kd.constants import ModelRole, RunMode, Stage
from proxy_kd.eval import MetricLog
from proxy_kd.model import FileCheckpointStore, LanguageModel
from proxy_kd.pipeline import ExperimentConfig, OutputExistsError, ProxyVariant, RunManifest, \
    RunStatus, StageError, TeacherQualityError, cached_variants, plan_stages, proxy_variants, \
    resolve_white_box_source, run_experiment

TINY = {
    'task': 'copy',
    'min_len': 2,
    'max_len': 3,
    'n_examples': 20,
    'n_test': 4,
    'seeds': [0],
    'max_seq_len': 12,
    'n_heads': 2,
    'student_layers': 1,
    'student_d_model': 8,
    'proxy_layers': 1,
    'proxy_d_model': 8,
    'teacher_layers': 1,
    'teacher_d_model': 8,
    'batch_size': 4,
    'k': 1,
    'top_k': 5,
    'student_steps': 2,
    'eval_every': 1,
    'coverage_k': [1, 5],
}


@pytest.fixture
def tiny_experiment():
    return ExperimentConfig(TINY)


class TestPlanning:
    """Test stage planning from the config."""

    def test_variants_follow_modes(self):
        config = ExperimentConfig({'modes': RunMode.ALL})
        assert proxy_variants(config) == [ProxyVariant.ALIGNED, ProxyVariant.NO_PREF,
                                          ProxyVariant.UNALIGNED]
        assert cached_variants(config) == ['aligned', 'no_pref', 'unaligned']
        vanilla = ExperimentConfig({'mode': RunMode.VANILLA_BLACKBOX})
        assert proxy_variants(vanilla) == [ProxyVariant.ALIGNED]
        assert cached_variants(vanilla) == []

    def test_white_box_source(self):
        assert resolve_white_box_source(ExperimentConfig()) == 'proxy'
        assert resolve_white_box_source(ExperimentConfig({'teacher': 'transformer'})) == 'teacher'

    def test_plan_lists_stages_in_order(self):
        stages = [s for (s, _) in plan_stages(ExperimentConfig({'teacher': 'transformer'}))]
        assert stages == Stage.ALL
        assert Stage.TRAIN_TEACHER not in [s for (s, _) in plan_stages(ExperimentConfig())]

    def test_dry_run_writes_nothing(self, tmp_path, capsys):
        out = str(tmp_path / 'never')
        manifest = run_experiment(ExperimentConfig(), out, dry_run=True)
        assert manifest.status == RunStatus.PLANNED
        assert not os.path.exists(out)
        assert 'Stage plan' in capsys.readouterr().out


class TestRunExperiment:
    """End-to-end runs on a tiny configuration."""

    def test_all_modes(self, tiny_experiment, tmp_path):
        """Every mode yields a run, a checkpoint and a report cell."""
        config = tiny_experiment.with_overrides({'modes': RunMode.ALL})
        out = str(tmp_path / 'exp')
        manifest = run_experiment(config, out)
        assert manifest.status == RunStatus.COMPLETE
        assert [r['mode'] for r in manifest.runs] == RunMode.ALL
        store = FileCheckpointStore(os.path.join(out, 'checkpoints'))
        for run in manifest.runs:
            assert run['run_id'] == 'copy-{}-proxy1x8-seed0'.format(run['mode'])
            assert run['proxy_size'] == '1x8'
            assert os.path.exists(store.path(run['checkpoint']))
            assert 0.0 <= run['final_accuracy'] <= 1.0
        assert manifest.data['0']['splits']['sizes'] == [2, 9, 9]
        diagnostics = manifest.diagnostics['0']
        assert set(diagnostics['coverage']) == {'1', '5'}
        assert set(diagnostics['proxy_accuracy']) == {'aligned', 'no_pref', 'unaligned'}
        assert RunManifest.load(os.path.join(out, 'manifest.json')) == manifest
        with open(os.path.join(out, 'report', 'report.json')) as f:
            assert json.load(f)['modes'] == RunMode.ALL

    def test_reproducible(self, tiny_experiment, tmp_path):
        """Two runs of the same config give the same manifest hash and report bytes."""
        outputs = []
        for name in ('a', 'b'):
            out = str(tmp_path / name)
            manifest = run_experiment(tiny_experiment, out)
            with open(os.path.join(out, 'report', 'report.json'), 'rb') as f:
                outputs.append((manifest.manifest_hash(), f.read()))
        assert outputs[0] == outputs[1]

    def test_split_isolation_is_recorded(self, tiny_experiment, tmp_path):
        manifest = run_experiment(tiny_experiment, str(tmp_path / 'exp'), report=False)
        access = manifest.data['0']['split_access']
        assert access == {'d_w': [Stage.WARMUP], 'd_p': [Stage.ALIGN],
                          'd_s': sorted([Stage.CACHE, Stage.STATS, Stage.DISTILL])}

    def test_stage_wall_times_and_sizes(self, tiny_experiment, tmp_path):
        """Each stage's wall time lands in the timing log; parameter counts in diagnostics."""
        out = str(tmp_path / 'exp')
        manifest = run_experiment(tiny_experiment, out, report=False)
        frame = MetricLog.load(os.path.join(out, 'metrics', 'timing.csv')).to_frame()
        assert sorted(frame.metric) == sorted(
            '{}_wall_time_s'.format(stage) for (stage, _) in plan_stages(tiny_experiment))
        assert set(frame.run) == {'timing'} and set(frame.step) == {0}
        assert (frame.value >= 0).all()
        assert 'wall_time' not in json.dumps(manifest.to_jsonable())
        counts = manifest.diagnostics['0']['parameters']
        for role in (ModelRole.PROXY, ModelRole.STUDENT):
            model = LanguageModel(tiny_experiment.model_config(role), role)
            assert counts[role] == model.num_parameters()

    def test_existing_output(self, tiny_experiment, tmp_path):
        out = tmp_path / 'exp'
        out.mkdir()
        (out / 'keep.txt').write_text('x')
        with pytest.raises(OutputExistsError):
            run_experiment(tiny_experiment, str(out))
        assert (out / 'keep.txt').exists()

    def test_failed_stage_is_recorded(self, tiny_experiment, tmp_path):
        """A teacher below its gate fails the train_teacher stage and marks the manifest."""
        config = tiny_experiment.with_overrides({
            'teacher': 'transformer', 'teacher_steps': 0, 'teacher_train_size': 8,
            'teacher_min_accuracy': 1.0})
        out = str(tmp_path / 'exp')
        with pytest.raises(StageError) as info:
            run_experiment(config, out)
        assert info.value.stage == Stage.TRAIN_TEACHER
        assert isinstance(info.value.cause, TeacherQualityError)
        manifest = RunManifest.load(os.path.join(out, 'manifest.json'))
        assert (manifest.status, manifest.failed_stage) == (RunStatus.FAILED,
                                                            Stage.TRAIN_TEACHER)
        assert manifest.error.startswith('TeacherQualityError')
        frame = MetricLog.load(os.path.join(out, 'metrics', 'timing.csv')).to_frame()
        assert list(frame.metric)[-1] == '{}_wall_time_s'.format(Stage.TRAIN_TEACHER)


@pytest.mark.slow
class TestAcceptance:
    """Desk-scale runs; set PROXY_KD_RUN_SLOW=1."""

    def test_alignment_raises_match_ratio(self, tmp_path):
        """An aligned proxy agrees with the teacher more than the warmed-up one."""
        config = ExperimentConfig({'task': 'copy', 'min_len': 3, 'max_len': 5,
                                   'n_examples': 400, 'n_test': 50, 'seeds': [0],
                                   'proxy_layers': 2, 'proxy_d_model': 64, 'student_layers': 1,
                                   'student_d_model': 32, 'k': 3, 'lr': 3e-3,
                                   'student_steps': 50, 'eval_every': 50})
        manifest = run_experiment(config, str(tmp_path / 'exp'), report=False)
        ratio = manifest.diagnostics['0']['match_ratio']
        assert ratio['after_alignment'] > ratio['before_alignment']

    def test_ablation_suite(self, tmp_path):
        """All six modes over three seeds fill a 6x1 report."""
        config = ExperimentConfig({'task': 'modadd', 'modulus': 23, 'n_examples': 300,
                                   'n_test': 40, 'proxy_layers': 1, 'proxy_d_model': 32,
                                   'student_layers': 1, 'student_d_model': 16, 'k': 2,
                                   'student_steps': 40, 'eval_every': 20,
                                   'modes': RunMode.ALL})
        out = str(tmp_path / 'exp')
        run_experiment(config, out)
        with open(os.path.join(out, 'report', 'report.json')) as f:
            report = json.load(f)
        assert len(report['cells']) == 6
        assert all(cell['n'] == 3 for cell in report['cells'])
