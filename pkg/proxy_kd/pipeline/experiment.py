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

import hashlib
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

from proxy_kd import config as env
from proxy_kd.autodiff import is_test_mode, test_mode
from proxy_kd.blackbox import ProgrammaticTeacher, TransformerTeacher, build_logit_cache, \
    read_logit_cache, topk_coverage, write_logit_cache, write_skipped_manifest
from proxy_kd.constants import TEST_SEED_OFFSET, ModelRole, RunMode, Stage, TeacherBackend
from proxy_kd.corpus import generate_task_corpus, save_jsonl, split_corpus, stage_scope
from proxy_kd.eval import MetricLog, MetricLogger, emit_report, match_ratio, task_accuracy
from proxy_kd.losses import compute_weight_stats
from proxy_kd.model import FileCheckpointStore, LanguageModel
from proxy_kd.utils import configure_logging
from .config import ExperimentConfig, Precision, WhiteBoxSource
from .stages import AlignmentSchedule, StageError, align_proxy, distill_student, label_corpus, \
    train_teacher, warmup_proxy

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_FILE = 'manifest.json'
# Per-stage wall time goes to metrics/timing.csv, never into the manifest
TIMING_RUN = 'timing'
WALL_TIME_SUFFIX = '_wall_time_s'


class OutputExistsError(FileExistsError):
    pass


class RunStatus():
    RUNNING = 'running'
    COMPLETE = 'complete'
    FAILED = 'failed'
    PLANNED = 'planned'


class ProxyVariant():
    ALIGNED = 'aligned'
    NO_PREF = 'no_pref'
    UNALIGNED = 'unaligned'


# Proxy whose cached logits and weights each mode distills from
MODE_PROXY = {
    RunMode.PROXY_KD: ProxyVariant.ALIGNED,
    RunMode.PROXY_KD_NO_WEIGHT: ProxyVariant.ALIGNED,
    RunMode.PROXY_KD_NO_PREF: ProxyVariant.NO_PREF,
    RunMode.TAKD_UNALIGNED_PROXY: ProxyVariant.UNALIGNED,
}


@dataclass
class RunManifest():
    '''
    Everything needed to replay an experiment: the effective config, seeds, data hashes and the
    content-addressed checkpoint of every stage. Paths are relative to the manifest's directory.
    '''
    config: dict
    config_hash: str
    seeds: List[int]
    split_seed: int
    schema_version: int = MANIFEST_SCHEMA_VERSION
    status: str = RunStatus.RUNNING
    failed_stage: Optional[str] = None
    error: Optional[str] = None
    data: Dict[str, dict] = field(default_factory=dict)
    stages: Dict[str, dict] = field(default_factory=dict)
    diagnostics: Dict[str, dict] = field(default_factory=dict)
    runs: List[dict] = field(default_factory=list)

    def to_jsonable(self) -> dict:
        return asdict(self)

    def manifest_hash(self) -> str:
        canonical = json.dumps(self.to_jsonable(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_jsonable(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> 'RunManifest':
        with open(path, encoding='utf-8') as f:
            return cls(**json.load(f))


def resolve_white_box_source(config: ExperimentConfig) -> str:
    if config.white_box_source == WhiteBoxSource.AUTO:
        if config.teacher == TeacherBackend.TRANSFORMER:
            return WhiteBoxSource.TEACHER
        return WhiteBoxSource.PROXY
    return config.white_box_source


def proxy_variants(config: ExperimentConfig) -> List[str]:
    '''
    Proxies the run modes need, the aligned one always included.
    '''
    needed = {ProxyVariant.ALIGNED} | {MODE_PROXY[m] for m in config.modes if m in MODE_PROXY}
    return [
        v for v in (ProxyVariant.ALIGNED, ProxyVariant.NO_PREF, ProxyVariant.UNALIGNED)
        if v in needed
    ]


def cached_variants(config: ExperimentConfig) -> List[str]:
    return sorted({MODE_PROXY[m] for m in config.modes if m in MODE_PROXY})


def plan_stages(config: ExperimentConfig) -> List[Tuple[str, str]]:
    '''
    :returns: ``(stage, detail)`` for every stage one seed runs, in order
    '''
    spec = config.task_spec()
    plan = [(Stage.GENERATE, '{} prompts + {} test prompts of task "{}"'.format(
        config.n_examples, config.n_test, spec.name))]
    if config.teacher == TeacherBackend.TRANSFORMER:
        plan.append((Stage.TRAIN_TEACHER, '{} steps on {} ground-truth examples, gate {}'.format(
            config.teacher_steps, config.teacher_train_size, config.teacher_min_accuracy)))
    plan.append((Stage.LABEL, '{} teacher'.format(config.teacher)))
    plan.append((Stage.SPLIT, 'fractions {}, split seed {}'.format(config.fractions,
                                                                     config.split_seed)))
    plan.append((Stage.WARMUP, '{} epoch(s) on d_w'.format(config.warmup_epochs)))
    aligned = [v for v in proxy_variants(config) if v != ProxyVariant.UNALIGNED]
    plan.append((Stage.ALIGN, 'k={}, beta={}, proxies: {}'.format(config.k, config.beta,
                                                                  ', '.join(aligned))))
    cached = cached_variants(config)
    plan.append((Stage.CACHE, 'top-{} logits over d_s for: {}'.format(
        config.top_k, ', '.join(cached) or 'none')))
    plan.append((Stage.STATS, 'weights over d_s for: {}'.format(', '.join(cached) or 'none')))
    plan.append((Stage.DISTILL, '{} steps per mode: {}'.format(config.student_steps,
                                                               ', '.join(config.modes))))
    plan.append((Stage.EVAL, 'accuracy, match ratio, top-K coverage'))
    return plan


def _print_header(msg):
    print('-' * (len(msg) + 4))
    print('| {} |'.format(msg))
    print('-' * (len(msg) + 4))


def inform_user(msg):
    print(f'\033[94m{msg}\033[0m')


def print_plan(config: ExperimentConfig, output_dir: str):
    _print_header('Checking experiment configuration...')
    print(json.dumps(config.to_jsonable(), indent=2, sort_keys=True))
    inform_user('Config hash: {}'.format(config.config_hash()))
    _print_header('Stage plan')
    for seed in config.seeds:
        for (stage, detail) in plan_stages(config):
            inform_user('seed {}: {:<14} {}'.format(seed, stage, detail))
    inform_user('Outputs go to {}'.format(output_dir))


def _sha256_file(path: str) -> str:
    with open(path, 'rb') as f:
        return hashlib.sha256(f.read()).hexdigest()


class _Experiment():

    def __init__(self, config: ExperimentConfig, output_dir: str):
        self.config = config
        self.output_dir = output_dir
        self.manifest = RunManifest(config=config.to_jsonable(),
                                    config_hash=config.config_hash(),
                                    seeds=list(config.seeds),
                                    split_seed=config.split_seed)
        self.manifest_path = os.path.join(output_dir, MANIFEST_FILE)
        self.store = FileCheckpointStore(os.path.join(output_dir, 'checkpoints'))
        self.spec = config.task_spec()
        self.timings = self._metric_logger(TIMING_RUN)

    def _rel(self, path: str) -> str:
        return os.path.relpath(path, self.output_dir)

    def _seed_path(self, seed: int, name: str) -> str:
        seed_dir = os.path.join(self.output_dir, 'seed-{}'.format(seed))
        os.makedirs(seed_dir, exist_ok=True)
        return os.path.join(seed_dir, name)

    def _metric_logger(self, run_id: str) -> MetricLogger:
        return MetricLogger(run_id, MetricLog())

    def _save_metrics(self, metric_logger: MetricLogger) -> str:
        metrics_dir = os.path.join(self.output_dir, 'metrics')
        os.makedirs(metrics_dir, exist_ok=True)
        path = os.path.join(metrics_dir, '{}.csv'.format(metric_logger.run))
        metric_logger.metric_log.save(path)
        return self._rel(path)

    @contextmanager
    def stage(self, name: str, seed: int):
        logger.info('Seed {}: stage "{}"'.format(seed, name))
        record = self.manifest.stages.setdefault(str(seed), {}).setdefault(name, {})
        started = time.perf_counter()
        with stage_scope(name):
            try:
                yield record
            except Exception as e:
                self.manifest.status = RunStatus.FAILED
                self.manifest.failed_stage = name
                self.manifest.error = '{}: {}'.format(type(e).__name__, e)
                self.manifest.save(self.manifest_path)
                raise StageError(name, e) from e
            finally:
                elapsed = time.perf_counter() - started
                self.timings.log(step=seed, **{name + WALL_TIME_SUFFIX: elapsed})
                self._save_metrics(self.timings)

    def run(self) -> RunManifest:
        for seed in self.config.seeds:
            self._run_seed(seed)
        self.manifest.status = RunStatus.COMPLETE
        self.manifest.save(self.manifest_path)
        return self.manifest

    def _run_seed(self, seed: int):
        cfg = self.config
        spec = self.spec
        diagnostics = self.manifest.diagnostics.setdefault(str(seed), {})
        data = self.manifest.data.setdefault(str(seed), {})

        with self.stage(Stage.GENERATE, seed):
            prompts = generate_task_corpus(spec, cfg.n_examples, seed)
            test_prompts = generate_task_corpus(spec,
                                                cfg.n_test,
                                                TEST_SEED_OFFSET + seed,
                                                exclude={tuple(e.x) for e in prompts})

        teacher_model = None
        if cfg.teacher == TeacherBackend.TRANSFORMER:
            with self.stage(Stage.TRAIN_TEACHER, seed) as record:
                teacher_model = LanguageModel(cfg.model_config(ModelRole.TEACHER),
                                              ModelRole.TEACHER,
                                              seed=seed)
                metric_logger = self._metric_logger('teacher-{}-seed{}'.format(spec.name, seed))
                diagnostics['teacher_accuracy'] = train_teacher(
                    teacher_model, spec, test_prompts, cfg.teacher_train_size, cfg.teacher_steps,
                    cfg.batch_size, cfg.lr, seed, cfg.teacher_min_accuracy, metric_logger,
                    cfg.threads, cfg.progress)
                record['checkpoint'] = self.store.save(teacher_model)
                record['metrics_path'] = self._save_metrics(metric_logger)
            teacher = TransformerTeacher(teacher_model, temperature=cfg.teacher_temperature)
        else:
            teacher = ProgrammaticTeacher(spec, noise_rate=cfg.teacher_noise)

        with self.stage(Stage.LABEL, seed):
            corpus = label_corpus(prompts, teacher, seed, cfg.threads)
            held_out = label_corpus(test_prompts, teacher, seed, cfg.threads)
            for (name, examples) in (('corpus.jsonl', corpus), ('test.jsonl', held_out)):
                path = self._seed_path(seed, name)
                save_jsonl(examples, path)
                data[name] = {'path': self._rel(path), 'sha256': _sha256_file(path)}
        training_ids = [e.id for e in corpus]

        with self.stage(Stage.SPLIT, seed):
            split = split_corpus(corpus, cfg.fractions, cfg.split_seed)
            path = self._seed_path(seed, 'splits.json')
            with open(path, 'w', encoding='utf-8') as f:
                json.dump({name: part.ids() for (name, part) in split.parts().items()},
                          f,
                          indent=2,
                          sort_keys=True)
            data['splits'] = {'path': self._rel(path), 'sizes': list(split.sizes())}

        with self.stage(Stage.WARMUP, seed) as record:
            warmed = LanguageModel(cfg.model_config(ModelRole.PROXY), ModelRole.PROXY, seed=seed)
            diagnostics['parameters'] = {ModelRole.PROXY: warmed.num_parameters()}
            metric_logger = self._metric_logger('warmup-{}-seed{}'.format(spec.name, seed))
            warmup_proxy(warmed, split.d_w, cfg.warmup_epochs, cfg.batch_size, cfg.lr, seed,
                         metric_logger, cfg.progress)
            record['checkpoint'] = self.store.save(warmed)
            record['metrics_path'] = self._save_metrics(metric_logger)

        proxies = {ProxyVariant.UNALIGNED: warmed}
        with self.stage(Stage.ALIGN, seed) as record:
            for variant in proxy_variants(cfg):
                if variant == ProxyVariant.UNALIGNED:
                    continue
                proxy = warmed.copy()
                schedule = AlignmentSchedule(k=cfg.k,
                                             pairs_per_prompt=cfg.pairs_per_prompt,
                                             temperature=cfg.sample_temperature,
                                             convergence_eps=cfg.convergence_eps,
                                             convergence_window=cfg.convergence_window,
                                             use_preference=variant == ProxyVariant.ALIGNED)
                metric_logger = self._metric_logger('align_{}-{}-seed{}'.format(
                    variant, spec.name, seed))
                log = align_proxy(proxy, None, split.d_p, schedule, cfg.beta, cfg.batch_size,
                                  cfg.lr, seed, metric_logger, held_out, cfg.threads,
                                  cfg.progress)
                log_path = self._seed_path(seed, 'alignment_{}.json'.format(variant))
                log.save(log_path)
                record[variant] = {
                    'checkpoint': self.store.save(proxy),
                    'log_path': self._rel(log_path),
                    'metrics_path': self._save_metrics(metric_logger),
                    'converged': log.converged,
                    'steps': log.total_steps
                }
                proxies[variant] = proxy

        caches = {}
        with self.stage(Stage.CACHE, seed) as record:
            for variant in cached_variants(cfg):
                (cache, skipped) = build_logit_cache(proxies[variant], split.d_s, cfg.top_k,
                                                     cfg.threads, cfg.progress)
                cache_path = self._seed_path(seed, 'logit_cache_{}.pkdc'.format(variant))
                write_logit_cache(cache, cache_path)
                skipped_path = self._seed_path(seed, 'skipped_{}.json'.format(variant))
                write_skipped_manifest(skipped, skipped_path)
                caches[variant] = read_logit_cache(cache_path)
                record[variant] = {
                    'path': self._rel(cache_path),
                    'sha256': _sha256_file(cache_path),
                    'skipped_path': self._rel(skipped_path)
                }

        stats = {}
        with self.stage(Stage.STATS, seed) as record:
            for variant in cached_variants(cfg):
                stats[variant] = compute_weight_stats(proxies[variant], split.d_s,
                                                      cfg.weight_loglik, cfg.threads)
                path = self._seed_path(seed, 'weights_{}.json'.format(variant))
                stats[variant].save(path)
                record[variant] = {'path': self._rel(path), 'degenerate': stats[variant].degenerate}

        white_box_source = resolve_white_box_source(cfg)
        with self.stage(Stage.DISTILL, seed) as record:
            for mode in cfg.modes:
                run_id = '{}-{}-proxy{}-seed{}'.format(spec.name, mode, cfg.proxy_size, seed)
                variant = MODE_PROXY.get(mode)
                if mode == RunMode.WHITE_BOX_FKL:
                    source = teacher_model if white_box_source == WhiteBoxSource.TEACHER \
                        else proxies[ProxyVariant.ALIGNED]
                else:
                    source = caches.get(variant)
                student = LanguageModel(cfg.model_config(ModelRole.STUDENT),
                                        ModelRole.STUDENT,
                                        seed=seed)
                metric_logger = self._metric_logger(run_id)
                diagnostics['parameters'][ModelRole.STUDENT] = student.num_parameters()
                result = distill_student(student, split.d_s, source, stats.get(variant), mode,
                                         cfg.alpha, cfg.student_steps, cfg.batch_size, cfg.lr,
                                         seed, cfg.kl_reduction, held_out, spec, cfg.eval_every,
                                         training_ids, metric_logger, cfg.threads, cfg.progress)
                record[mode] = self.store.save(student)
                run = {
                    'run_id': run_id,
                    'mode': mode,
                    'task': spec.name,
                    'seed': seed,
                    'proxy_size': cfg.proxy_size,
                    'checkpoint': record[mode],
                    'metrics_path': self._save_metrics(metric_logger),
                    'final_accuracy': result.final_accuracy
                }
                if variant is not None:
                    run['proxy'] = variant
                if mode == RunMode.WHITE_BOX_FKL:
                    run['white_box_source'] = white_box_source
                self.manifest.runs.append(run)

        with self.stage(Stage.EVAL, seed):
            diagnostics['match_ratio'] = {
                'before_alignment': match_ratio(warmed, held_out, cfg.threads),
                'after_alignment': match_ratio(proxies[ProxyVariant.ALIGNED], held_out,
                                               cfg.threads)
            }
            diagnostics['coverage'] = {
                str(k): pct
                for (k, pct) in topk_coverage(proxies[ProxyVariant.ALIGNED], held_out,
                                              cfg.coverage_k).items()
            }
            diagnostics['proxy_accuracy'] = {
                variant: task_accuracy(proxy, held_out, spec, training_ids, cfg.threads)
                for (variant, proxy) in sorted(proxies.items())
            }
            data['split_access'] = {
                name: sorted(part.accessed_by) for (name, part) in split.parts().items()
            }
            if is_test_mode():
                split.check_isolation()
            logger.info('Seed {} diagnostics: {}'.format(seed, diagnostics))

        self.manifest.save(self.manifest_path)


def prepare_output_dir(output_dir: str, overwrite: bool = False):
    if os.path.exists(output_dir) and os.listdir(output_dir):
        if not overwrite:
            raise OutputExistsError(
                'Output directory "{}" is not empty; pass --overwrite to replace it'.format(
                    output_dir))
        logger.warning('Overwriting output directory "{}"'.format(output_dir))
        shutil.rmtree(output_dir)
    os.makedirs(output_dir, exist_ok=True)


def run_experiment(config: ExperimentConfig,
                   output_dir: Optional[str] = None,
                   overwrite: bool = False,
                   dry_run: bool = False,
                   report: bool = True,
                   log_to_file: bool = False) -> RunManifest:
    '''
    Runs every stage for every seed, then emits the comparison report under ``<output_dir>/report``.

    A failing stage leaves a manifest with status ``failed`` naming it and raises
    :class:`StageError`. With ``dry_run`` the config is validated and the stage plan printed; nothing
    is trained or written.
    '''
    output_dir = output_dir or os.path.join(env.OUTPUT_ROOT, config.config_hash()[:12])
    if dry_run:
        print_plan(config, output_dir)
        return RunManifest(config=config.to_jsonable(),
                           config_hash=config.config_hash(),
                           seeds=list(config.seeds),
                           split_seed=config.split_seed,
                           status=RunStatus.PLANNED)

    prepare_output_dir(output_dir, overwrite)
    if log_to_file:
        configure_logging('experiment', os.path.join(output_dir, 'logs'))
    precise = config.precision == Precision.FLOAT64 or env.TEST_MODE or is_test_mode()
    with test_mode(precise):
        manifest = _Experiment(config, output_dir).run()
    logger.info('Experiment complete, manifest hash {}'.format(manifest.manifest_hash()))
    if report:
        emit_report([os.path.join(output_dir, MANIFEST_FILE)], os.path.join(output_dir, 'report'))
    return manifest
