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

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from proxy_kd import config as env
from proxy_kd.autodiff import GRADCHECK_TOLERANCE, primitive_cases, run_gradient_suite
from proxy_kd.blackbox import ProgrammaticTeacher, TransformerTeacher, build_logit_cache, \
    read_logit_cache, write_logit_cache, write_skipped_manifest
from proxy_kd.constants import TEST_SEED_OFFSET, ExitCode, ModelRole, Stage, TeacherBackend
from proxy_kd.corpus import Vocab, generate_task_corpus, load_jsonl, save_jsonl, split_corpus, \
    stage_scope
from proxy_kd.eval import MetricLog, MetricLogger, emit_report, match_ratio, task_accuracy
from proxy_kd.losses import WeightStats, compute_weight_stats, gradient_cases
from proxy_kd.model import LanguageModel, load_checkpoint, save_checkpoint
from proxy_kd.pipeline import AlignmentSchedule, ExperimentConfig, OutputExistsError, \
    StageError, align_proxy, describe_knobs, distill_student, label_corpus, parse_overrides, \
    run_experiment, train_teacher, warmup_proxy
from proxy_kd.utils import configure_logging

logger = logging.getLogger(__name__)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):

    def error(self, message):
        raise UsageError(message)


def exit_code_for(e: BaseException) -> int:
    if isinstance(e, (UsageError, FileNotFoundError, FileExistsError)):
        return ExitCode.USAGE
    if isinstance(e, StageError):
        return ExitCode.RUNTIME
    if isinstance(e, ValueError):
        return ExitCode.VALIDATION
    return ExitCode.RUNTIME


def _error_line(e: BaseException, code: int) -> str:
    line = {'error': type(e).__name__, 'message': str(e), 'exit_code': code}
    if isinstance(e, StageError):
        line['stage'] = e.stage
        line['cause'] = type(e.cause).__name__
    return json.dumps(line, sort_keys=True)


####################################
# Shared helpers
####################################


def load_config(args) -> ExperimentConfig:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides['seeds'] = [args.seed]
    if args.threads is not None:
        overrides['threads'] = args.threads
    if args.config:
        return ExperimentConfig.from_toml(args.config, overrides)
    return ExperimentConfig(overrides)


def _seed(args, cfg: ExperimentConfig) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def _output_dir(args) -> str:
    return args.output_dir or env.OUTPUT_ROOT


def _output(args, name: str) -> str:
    path = os.path.join(_output_dir(args), name)
    if os.path.exists(path) and not args.overwrite:
        raise OutputExistsError('"{}" exists; pass --overwrite to replace it'.format(path))
    return path


def _require(path: Optional[str], flag: str) -> str:
    if path is None:
        raise UsageError('{} is required'.format(flag))
    if not os.path.exists(path):
        raise FileNotFoundError('No such file: "{}"'.format(path))
    return path


def _load_examples(args, path: Optional[str], flag: str):
    vocab = Vocab.load(_require(args.vocab, '--vocab')) if args.vocab else None
    return load_jsonl(_require(path, flag), vocab=vocab)


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def _dry_run(args, cfg: ExperimentConfig, detail: str) -> int:
    _print_json({'command': args.command, 'config_hash': cfg.config_hash(), 'plan': detail})
    return ExitCode.SUCCESS


def _metric_logger(run_id: str) -> MetricLogger:
    return MetricLogger(run_id, MetricLog())


def _save_metrics(args, metric_logger: MetricLogger, name: str) -> str:
    path = _output(args, name)
    metric_logger.metric_log.save(path)
    return path


def _load_proxy(args, cfg: ExperimentConfig, seed: int) -> LanguageModel:
    if args.proxy_checkpoint:
        return load_checkpoint(_require(args.proxy_checkpoint, '--proxy-checkpoint'))
    return LanguageModel(cfg.model_config(ModelRole.PROXY), ModelRole.PROXY, seed=seed)


def _teacher(args, cfg: ExperimentConfig):
    if cfg.teacher == TeacherBackend.TRANSFORMER:
        model = load_checkpoint(_require(args.teacher_checkpoint, '--teacher-checkpoint'))
        return TransformerTeacher(model, temperature=cfg.teacher_temperature)
    return ProgrammaticTeacher(cfg.task_spec(), noise_rate=cfg.teacher_noise)


####################################
# Subcommands
####################################


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    seed = _seed(args, cfg)
    if args.dry_run:
        return _dry_run(args, cfg, 'generate {} + {} test examples of "{}"'.format(
            cfg.n_examples, cfg.n_test, cfg.task))
    spec = cfg.task_spec()
    teacher = _teacher(args, cfg)
    (corpus_path, test_path) = (_output(args, 'corpus.jsonl'), _output(args, 'test.jsonl'))
    os.makedirs(_output_dir(args), exist_ok=True)
    with stage_scope(Stage.GENERATE):
        prompts = generate_task_corpus(spec, cfg.n_examples, seed)
        test_prompts = generate_task_corpus(spec, cfg.n_test, TEST_SEED_OFFSET + seed,
                                            exclude={tuple(e.x) for e in prompts})
    with stage_scope(Stage.LABEL):
        save_jsonl(label_corpus(prompts, teacher, seed, cfg.threads), corpus_path)
        save_jsonl(label_corpus(test_prompts, teacher, seed, cfg.threads), test_path)
    _print_json({'corpus': corpus_path, 'test': test_path})
    return ExitCode.SUCCESS


def cmd_split(args) -> int:
    cfg = load_config(args)
    examples = _load_examples(args, args.data, '--data')
    if args.dry_run:
        return _dry_run(args, cfg, 'split {} examples by {}'.format(len(examples),
                                                                   cfg.fractions))
    split = split_corpus(examples, cfg.fractions, cfg.split_seed)
    os.makedirs(_output_dir(args), exist_ok=True)
    paths = {}
    for (name, part) in split.parts().items():
        paths[name] = _output(args, '{}.jsonl'.format(name))
        save_jsonl(list(part), paths[name])
    _print_json({'paths': paths, 'sizes': list(split.sizes())})
    return ExitCode.SUCCESS


def cmd_train_teacher(args) -> int:
    cfg = load_config(args)
    seed = _seed(args, cfg)
    if args.dry_run:
        return _dry_run(args, cfg, 'train a teacher for {} steps'.format(cfg.teacher_steps))
    spec = cfg.task_spec()
    path = _output(args, 'teacher.pkd')
    os.makedirs(_output_dir(args), exist_ok=True)
    model = LanguageModel(cfg.model_config(ModelRole.TEACHER), ModelRole.TEACHER, seed=seed)
    test_prompts = generate_task_corpus(spec, cfg.n_test, TEST_SEED_OFFSET + seed)
    metric_logger = _metric_logger('teacher-{}-seed{}'.format(spec.name, seed))
    with stage_scope(Stage.TRAIN_TEACHER):
        accuracy = train_teacher(model, spec, test_prompts, cfg.teacher_train_size,
                                 cfg.teacher_steps, cfg.batch_size, cfg.lr, seed,
                                 cfg.teacher_min_accuracy, metric_logger, cfg.threads,
                                 cfg.progress)
    sha = save_checkpoint(model, path)
    _save_metrics(args, metric_logger, 'teacher_metrics.csv')
    _print_json({'checkpoint': path, 'sha256': sha, 'accuracy': accuracy})
    return ExitCode.SUCCESS


def cmd_warmup(args) -> int:
    cfg = load_config(args)
    seed = _seed(args, cfg)
    d_w = _load_examples(args, args.data, '--data')
    if args.dry_run:
        return _dry_run(args, cfg, 'warm up on {} examples for {} epoch(s)'.format(
            len(d_w), cfg.warmup_epochs))
    proxy = _load_proxy(args, cfg, seed)
    path = _output(args, 'proxy_warmup.pkd')
    os.makedirs(_output_dir(args), exist_ok=True)
    metric_logger = _metric_logger('warmup-seed{}'.format(seed))
    with stage_scope(Stage.WARMUP):
        warmup_proxy(proxy, d_w, cfg.warmup_epochs, cfg.batch_size, cfg.lr, seed, metric_logger,
                     cfg.progress)
    sha = save_checkpoint(proxy, path)
    _save_metrics(args, metric_logger, 'warmup_metrics.csv')
    _print_json({'checkpoint': path, 'sha256': sha})
    return ExitCode.SUCCESS


def cmd_align(args) -> int:
    cfg = load_config(args)
    seed = _seed(args, cfg)
    d_p = _load_examples(args, args.data, '--data')
    held_out = _load_examples(args, args.held_out, '--held-out') if args.held_out else []
    proxy = load_checkpoint(_require(args.proxy_checkpoint, '--proxy-checkpoint'))
    if args.dry_run:
        return _dry_run(args, cfg, 'align on {} examples, k={}'.format(len(d_p), cfg.k))
    schedule = AlignmentSchedule(k=cfg.k,
                                 pairs_per_prompt=cfg.pairs_per_prompt,
                                 temperature=cfg.sample_temperature,
                                 convergence_eps=cfg.convergence_eps,
                                 convergence_window=cfg.convergence_window,
                                 use_preference=not args.no_preference)
    teacher = _teacher(args, cfg) if any(not e.is_labeled for e in d_p) else None
    path = _output(args, 'proxy_aligned.pkd')
    log_path = _output(args, 'alignment_log.json')
    os.makedirs(_output_dir(args), exist_ok=True)
    metric_logger = _metric_logger('align-seed{}'.format(seed))
    with stage_scope(Stage.ALIGN):
        log = align_proxy(proxy, teacher, d_p, schedule, cfg.beta, cfg.batch_size, cfg.lr, seed,
                          metric_logger, held_out, cfg.threads, cfg.progress)
    log.save(log_path)
    sha = save_checkpoint(proxy, path)
    _save_metrics(args, metric_logger, 'align_metrics.csv')
    _print_json({'checkpoint': path, 'sha256': sha, 'log': log_path, 'converged': log.converged})
    return ExitCode.SUCCESS


def cmd_build_cache(args) -> int:
    cfg = load_config(args)
    d_s = _load_examples(args, args.data, '--data')
    proxy = load_checkpoint(_require(args.proxy_checkpoint, '--proxy-checkpoint'))
    if args.dry_run:
        return _dry_run(args, cfg, 'cache top-{} logits of {} examples'.format(
            cfg.top_k, len(d_s)))
    path = _output(args, 'logit_cache.pkdc')
    skipped_path = _output(args, 'skipped.json')
    os.makedirs(_output_dir(args), exist_ok=True)
    with stage_scope(Stage.CACHE):
        (cache, skipped) = build_logit_cache(proxy, d_s, cfg.top_k, cfg.threads, cfg.progress)
    write_logit_cache(cache, path)
    write_skipped_manifest(skipped, skipped_path)
    _print_json({'cache': path, 'examples': len(cache), 'skipped': len(skipped)})
    return ExitCode.SUCCESS


def cmd_weight_stats(args) -> int:
    cfg = load_config(args)
    d_s = _load_examples(args, args.data, '--data')
    proxy = load_checkpoint(_require(args.proxy_checkpoint, '--proxy-checkpoint'))
    if args.dry_run:
        return _dry_run(args, cfg, 'weights over {} examples'.format(len(d_s)))
    path = _output(args, 'weights.json')
    os.makedirs(_output_dir(args), exist_ok=True)
    with stage_scope(Stage.STATS):
        stats = compute_weight_stats(proxy, d_s, cfg.weight_loglik, cfg.threads)
    stats.save(path)
    _print_json({'weights': path, 'mu': stats.mu, 'gamma': stats.gamma})
    return ExitCode.SUCCESS


def cmd_distill(args) -> int:
    cfg = load_config(args)
    seed = _seed(args, cfg)
    if len(cfg.modes) != 1:
        raise UsageError('distill runs exactly one mode; pass --set mode=<mode>')
    mode = cfg.modes[0]
    d_s = _load_examples(args, args.data, '--data')
    testset = _load_examples(args, args.test, '--test') if args.test else []
    if args.white_box_checkpoint:
        source = load_checkpoint(_require(args.white_box_checkpoint, '--white-box-checkpoint'))
    elif args.cache:
        source = read_logit_cache(_require(args.cache, '--cache'))
    else:
        source = None
    stats = WeightStats.load(_require(args.weights, '--weights')) if args.weights else None
    if args.dry_run:
        return _dry_run(args, cfg, 'distill in mode {} for {} steps'.format(
            mode, cfg.student_steps))
    path = _output(args, 'student_{}.pkd'.format(mode))
    os.makedirs(_output_dir(args), exist_ok=True)
    student = LanguageModel(cfg.model_config(ModelRole.STUDENT), ModelRole.STUDENT, seed=seed)
    metric_logger = _metric_logger('{}-{}-seed{}'.format(cfg.task, mode, seed))
    with stage_scope(Stage.DISTILL):
        result = distill_student(student, d_s, source, stats, mode, cfg.alpha, cfg.student_steps,
                                 cfg.batch_size, cfg.lr, seed, cfg.kl_reduction, testset,
                                 cfg.task_spec(), cfg.eval_every, [e.id for e in d_s],
                                 metric_logger, cfg.threads, cfg.progress)
    sha = save_checkpoint(student, path)
    _save_metrics(args, metric_logger, 'student_{}_metrics.csv'.format(mode))
    _print_json({'checkpoint': path, 'sha256': sha, 'final_accuracy': result.final_accuracy})
    return ExitCode.SUCCESS


def cmd_eval(args) -> int:
    cfg = load_config(args)
    model = load_checkpoint(_require(args.checkpoint, '--checkpoint'))
    testset = _load_examples(args, args.test, '--test')
    training_ids = []
    for path in args.training_data or []:
        training_ids.extend(e.id for e in _load_examples(args, path, '--training-data'))
    if args.dry_run:
        return _dry_run(args, cfg, 'evaluate on {} examples'.format(len(testset)))
    with stage_scope(Stage.EVAL):
        result = {
            'accuracy': task_accuracy(model, testset, cfg.task_spec(), training_ids, cfg.threads)
        }
        if all(e.is_labeled for e in testset):
            result['match_ratio'] = match_ratio(model, testset, cfg.threads)
    _print_json(result)
    return ExitCode.SUCCESS


def cmd_report(args) -> int:
    manifests = [_require(path, '--manifests') for path in args.manifests]
    if args.dry_run:
        _print_json({'command': args.command, 'manifests': manifests})
        return ExitCode.SUCCESS
    report = emit_report(manifests, _output_dir(args))
    print(report.to_frame().to_string())
    return ExitCode.SUCCESS


def cmd_run(args) -> int:
    cfg = load_config(args)
    output_dir = args.output_dir or os.path.join(env.OUTPUT_ROOT, cfg.config_hash()[:12])
    manifest = run_experiment(cfg,
                              output_dir,
                              overwrite=args.overwrite,
                              dry_run=args.dry_run,
                              log_to_file=True)
    if not args.dry_run:
        _print_json({'output_dir': output_dir, 'manifest_hash': manifest.manifest_hash()})
    return ExitCode.SUCCESS


def cmd_gradcheck(args) -> int:
    cases = primitive_cases() + gradient_cases()
    if args.dry_run:
        _print_json({'cases': [c.name for c in cases]})
        return ExitCode.SUCCESS
    errors = run_gradient_suite(cases, instances=args.instances,
                                seed=args.seed if args.seed is not None else 0)
    failing = sorted(name for (name, err) in errors.items() if not err < GRADCHECK_TOLERANCE)
    _print_json({'max_relative_error': errors, 'tolerance': GRADCHECK_TOLERANCE,
                 'failing': failing})
    return ExitCode.RUNTIME if failing else ExitCode.SUCCESS


COMMANDS = {
    'gen-data': cmd_gen_data,
    'split': cmd_split,
    'train-teacher': cmd_train_teacher,
    'warmup': cmd_warmup,
    'align': cmd_align,
    'build-cache': cmd_build_cache,
    'weight-stats': cmd_weight_stats,
    'distill': cmd_distill,
    'eval': cmd_eval,
    'report': cmd_report,
    'run': cmd_run,
    'gradcheck': cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument('--config', help='flat TOML experiment config')
    common.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                        help='override a config key (repeatable)')
    common.add_argument('--seed', type=int, help='run a single seed')
    common.add_argument('--output-dir', help='defaults to $PROXY_KD_OUTPUT_ROOT')
    common.add_argument('--overwrite', action='store_true', help='replace existing outputs')
    common.add_argument('--threads', type=int, help='worker threads for per-example work')
    common.add_argument('--dry-run', action='store_true', help='validate and print the plan only')
    common.add_argument('--vocab', help='vocab map (JSON) for JSONL files with raw-string fields')

    parser = _Parser(prog='proxy-kd',
                     description='Distill a student from a black-box teacher through an aligned '
                     'proxy.',
                     epilog=describe_knobs(),
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest='command', metavar='command', parser_class=_Parser)
    sub.required = True

    def add(name, help, *flags):
        p = sub.add_parser(name, help=help, parents=[common])
        for flag in flags:
            p.add_argument(*flag[0], **flag[1])
        return p

    data = (['--data'], {'help': 'input examples (JSONL)'})
    proxy = (['--proxy-checkpoint'], {'help': 'proxy checkpoint (.pkd)'})
    teacher = (['--teacher-checkpoint'], {'help': 'transformer teacher checkpoint (.pkd)'})
    test = (['--test'], {'help': 'held-out test examples (JSONL)'})

    add('gen-data', 'generate and label a corpus and a disjoint test set', teacher)
    add('split', 'split a corpus into d_w / d_p / d_s', data)
    add('train-teacher', 'train and gate a transformer teacher')
    add('warmup', 'SFT-train the proxy on d_w', data, proxy)
    add('align', 'align the proxy to the teacher on d_p', data, proxy, teacher,
        (['--held-out'], {'help': 'labeled examples for the held-out preference margin'}),
        (['--no-preference'], {'action': 'store_true', 'help': 'NLL only'}))
    add('build-cache', 'cache top-K proxy logits over d_s', data, proxy)
    add('weight-stats', 'compute proxy confidence weights over d_s', data, proxy)
    add('distill', 'train the student on d_s in one mode', data, test,
        (['--cache'], {'help': 'logit cache (.pkdc)'}),
        (['--weights'], {'help': 'weight statistics (JSON)'}),
        (['--white-box-checkpoint'], {'help': 'white-box soft-label model (.pkd)'}))
    add('eval', 'exact-match accuracy and match ratio of a checkpoint', test,
        (['--checkpoint'], {'help': 'model checkpoint (.pkd)'}),
        (['--training-data'], {'nargs': '*', 'help': 'JSONL files whose ids must not be tested'}))
    add('report', 'comparison table from experiment manifests',
        (['--manifests'], {'nargs': '+', 'required': True, 'help': 'manifest.json files'}))
    add('run', 'run the full experiment (all seeds and modes)')
    add('gradcheck', 'finite-difference check of every primitive and loss',
        (['--instances'], {'type': int, 'default': 10, 'help': 'random instances per case'}))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    configure_logging('proxy-kd')
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except Exception as e:
        code = exit_code_for(e)
        logger.debug('Command failed', exc_info=True)
        print(_error_line(e, code), file=sys.stderr)
        return code
