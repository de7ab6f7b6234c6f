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
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from proxy_kd.autodiff import Adam, Tape, backward, no_grad
from proxy_kd.blackbox import BlackBoxTeacher, LogitCacheFile, example_seed, teacher_generate
from proxy_kd.constants import EOS_ID, TEACHER_SEED_OFFSET, RunMode
from proxy_kd.corpus import Example, SplitError, TaskSpec, drop_overlong, generate_task_corpus, \
    ground_truth
from proxy_kd.eval.log import MetricLogger, SplitTag
from proxy_kd.eval.metrics import task_accuracy
from proxy_kd.losses import KLReduction, PreferencePair, WeightStats, dpo_loss_batch, \
    nll_loss_batch, proxy_loss_batch, student_loss_batch
from proxy_kd.model import LanguageModel, greedy_decode, model_hash
from proxy_kd.utils import ordered_map
from .trainer import epoch_batches, steps_per_epoch, train_steps

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    '''
    A pipeline stage failed; ``cause`` is the original exception.
    '''

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__('Stage "{}" failed: {}: {}'.format(stage, type(cause).__name__, cause))


class ModeResourceError(ValueError):
    pass


class TeacherQualityError(RuntimeError):
    pass


class ReferenceDriftError(RuntimeError):
    pass


####################################
# Teacher
####################################


def train_teacher(model: LanguageModel,
                  spec: TaskSpec,
                  testset: Sequence[Example],
                  train_size: int,
                  steps: int,
                  batch_size: int,
                  lr: float,
                  seed: int,
                  min_accuracy: float,
                  metric_logger: Optional[MetricLogger] = None,
                  threads: int = 1,
                  progress: bool = False) -> float:
    '''
    SFT-trains a transformer teacher on ground-truth answers to prompts from a reserved seed range,
    then gates it on test accuracy.

    :returns: The teacher's test accuracy
    :raises TeacherQualityError: When the accuracy stays below ``min_accuracy``
    '''
    exclude = {tuple(e.x) for e in testset}
    prompts = generate_task_corpus(spec, train_size, TEACHER_SEED_OFFSET + seed, exclude=exclude)
    examples = [e.with_response(ground_truth(spec, e.x)) for e in prompts]
    logger.info('Training teacher on {} ground-truth examples for {} steps'.format(
        len(examples), steps))

    train_steps(model, examples, lambda batch: nll_loss_batch(model, batch), steps, batch_size,
                seed, lr=lr, metric_logger=metric_logger, progress=progress)

    accuracy = task_accuracy(model, testset, spec, training_ids=[e.id for e in examples],
                             threads=threads)
    if metric_logger is not None:
        metric_logger.log(step=steps, split=SplitTag.TEST, accuracy=accuracy)
    if accuracy < min_accuracy:
        logger.warning('Teacher accuracy {:.4f} is below the gate {:.4f}'.format(
            accuracy, min_accuracy))
        raise TeacherQualityError(
            'Transformer teacher reached accuracy {:.4f}, needs at least {:.4f}; raise '
            '`teacher_steps` or `teacher_train_size`'.format(accuracy, min_accuracy))
    logger.info('Teacher accuracy: {:.4f}'.format(accuracy))
    return accuracy


def label_corpus(examples: Sequence[Example],
                 teacher: BlackBoxTeacher,
                 seed: int,
                 threads: int = 1) -> List[Example]:
    '''
    Fills each example's response from the teacher, seeding every call from ``(seed, example id)``.
    '''
    examples = list(examples)
    responses = ordered_map(lambda e: teacher_generate(teacher, e.x, example_seed(seed, e.id)),
                            examples,
                            threads=threads)
    return [e.with_response(y) for (e, y) in zip(examples, responses)]


####################################
# Proxy warm-up
####################################


def warmup_proxy(proxy: LanguageModel,
                 d_w: Sequence[Example],
                 epochs: int = 1,
                 batch_size: int = 16,
                 lr: float = 3e-4,
                 seed: int = 0,
                 metric_logger: Optional[MetricLogger] = None,
                 progress: bool = False) -> List[float]:
    '''
    NLL-trains the proxy on the teacher responses of ``d_w``.

    :returns: The training loss of every step; empty when ``epochs`` is 0
    '''
    (examples, _) = drop_overlong(list(d_w), proxy.config.max_seq_len, 'warm-up')
    if not examples:
        raise SplitError('Warm-up needs a non-empty d_w')
    if epochs == 0:
        logger.info('Warm-up skipped (0 epochs)')
        return []

    steps = epochs * steps_per_epoch(len(examples), batch_size)
    losses = train_steps(proxy, examples, lambda batch: nll_loss_batch(proxy, batch), steps,
                         batch_size, seed, lr=lr, metric_logger=metric_logger, progress=progress)
    logger.info('Warm-up: NLL {:.4f} -> {:.4f} over {} steps'.format(losses[0], losses[-1], steps))
    return losses


####################################
# Proxy alignment
####################################


@dataclass(frozen=True)
class AlignmentSchedule():
    k: int = 16
    pairs_per_prompt: int = 1
    temperature: float = 1.0
    convergence_eps: float = 1e-3
    convergence_window: int = 200
    use_preference: bool = True

    def __post_init__(self):
        if self.k < 0:
            raise ValueError('`k` should be >= 0, but is {}'.format(self.k))
        if self.pairs_per_prompt < 1:
            raise ValueError('`pairs_per_prompt` should be >= 1, but is {}'.format(
                self.pairs_per_prompt))
        if self.temperature < 0:
            raise ValueError('`temperature` should be >= 0, but is {}'.format(self.temperature))
        if self.convergence_eps < 0 or self.convergence_window < 1:
            raise ValueError('Convergence needs eps >= 0 and window >= 1')


@dataclass
class AlignmentIteration():
    iteration: int
    steps: int
    nll: float
    dpo: Optional[float]
    margin: Optional[float]
    skipped_pairs: int
    held_out_margin: Optional[float] = None


@dataclass
class AlignmentLog():
    iterations: List[AlignmentIteration] = field(default_factory=list)
    converged: bool = False
    total_steps: int = 0

    def to_jsonable(self):
        return asdict(self)

    def save(self, path: str):
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_jsonable(), f, indent=2, sort_keys=True)


def _mean(values) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


def sample_pairs(policy: LanguageModel,
                 examples: Sequence[Example],
                 schedule: AlignmentSchedule,
                 seed: int,
                 iteration: int,
                 threads: int = 1) -> Tuple[List[Example], List[Optional[PreferencePair]]]:
    '''
    Draws ``pairs_per_prompt`` proxy responses per example from the current policy.

    Examples are repeated once per pair. A sample equal to the teacher response gives ``None``.
    '''
    jobs = [(e, j) for e in examples for j in range(schedule.pairs_per_prompt)]
    max_seq_len = policy.config.max_seq_len

    def draw(job) -> Optional[PreferencePair]:
        (e, j) = job
        pair_seed = example_seed(seed, '{}/{}/{}'.format(e.id, iteration, j))
        y_hat = tuple(
            policy.sample(e.x, schedule.temperature, max_seq_len - len(e.x), pair_seed))
        if y_hat == tuple(e.y):
            return None
        return PreferencePair(e.x, e.y, y_hat, pair_seed)

    pairs = ordered_map(draw, jobs, threads=threads)
    return ([e for (e, _) in jobs], pairs)


def _held_out_margin(policy, reference, held_out, schedule, beta, seed, iteration,
                     threads) -> Optional[float]:
    (_, pairs) = sample_pairs(policy, held_out, schedule, seed, iteration, threads)
    present = [p for p in pairs if p is not None]
    if not present:
        return None
    with no_grad():
        (_, margins) = dpo_loss_batch(policy, reference, present, beta)
    return float(np.mean(margins))


def _converged(history: List[float], schedule: AlignmentSchedule) -> bool:
    w = schedule.convergence_window
    if schedule.convergence_eps <= 0 or len(history) < 2 * w:
        return False
    previous = np.mean(history[-2 * w:-w])
    current = np.mean(history[-w:])
    return abs(current - previous) < schedule.convergence_eps


def align_proxy(proxy: LanguageModel,
                teacher: Optional[BlackBoxTeacher],
                d_p: Sequence[Example],
                schedule: AlignmentSchedule,
                beta: float = 0.1,
                batch_size: int = 16,
                lr: float = 3e-4,
                seed: int = 0,
                metric_logger: Optional[MetricLogger] = None,
                held_out: Sequence[Example] = (),
                threads: int = 1,
                progress: bool = False) -> AlignmentLog:
    '''
    Iteratively aligns the proxy to the teacher's responses.

    Each iteration freezes a reference snapshot of the proxy and makes one pass over ``d_p``; every
    batch adds the NLL of the teacher responses to the preference loss of teacher responses over
    fresh proxy samples. Alignment stops after ``schedule.k`` iterations, or earlier once the moving
    average of the preference loss (the NLL without preference) changes by less than
    ``schedule.convergence_eps`` between consecutive windows.

    :param teacher: Labels examples of ``d_p`` that carry no response; may be None when all do
    :param held_out: Labeled examples on which the mean preference margin is measured per iteration
    '''
    if schedule.k == 0:
        logger.info('Alignment skipped (k=0)')
        return AlignmentLog()

    examples = list(d_p)
    if not examples:
        raise SplitError('Alignment needs a non-empty d_p')
    unlabeled = [e for e in examples if not e.is_labeled]
    if unlabeled:
        if teacher is None:
            raise ValueError('{} example(s) of d_p carry no teacher response'.format(
                len(unlabeled)))
        examples = [
            e if e.is_labeled else e.with_response(
                teacher_generate(teacher, e.x, example_seed(seed, e.id))) for e in examples
        ]
    (examples, _) = drop_overlong(examples, proxy.config.max_seq_len, 'alignment')
    if not examples:
        raise SplitError('No example of d_p fits max_seq_len {}'.format(
            proxy.config.max_seq_len))
    (held_out, _) = drop_overlong(held_out, proxy.config.max_seq_len, 'the held-out margin')

    optimizer = Adam(proxy.params, lr=lr)
    log = AlignmentLog()
    history = []
    step = 0
    for iteration in tqdm(range(1, schedule.k + 1), desc='align', disable=not progress):
        reference = proxy.copy(frozen=True)
        reference_hash = model_hash(reference)
        (nlls, dpos, margins, skipped, iteration_steps) = ([], [], [], 0, 0)

        for batch in epoch_batches(examples, batch_size, seed, iteration - 1):
            if schedule.use_preference:
                (batch, pairs) = sample_pairs(proxy, batch, schedule, seed, iteration, threads)
                skipped += sum(p is None for p in pairs)
            else:
                pairs = [None] * len(batch)
            with Tape():
                result = proxy_loss_batch(proxy, reference, batch, pairs, beta)
                backward(result.loss)
            optimizer.step()
            step += 1
            iteration_steps += 1

            nlls.append(result.nll)
            metrics = {'loss': result.loss.item(), 'nll': result.nll}
            if result.dpo is not None:
                dpos.append(result.dpo)
                margins.extend(result.margins.tolist())
                metrics.update(dpo=result.dpo, margin=float(np.mean(result.margins)))
            if metric_logger is not None:
                metric_logger.log(step=step, **metrics)

            objective = result.dpo if schedule.use_preference else result.nll
            if objective is not None:
                history.append(objective)
            if _converged(history, schedule):
                log.converged = True
                break

        if model_hash(reference) != reference_hash:
            raise ReferenceDriftError(
                'Reference parameters changed during alignment iteration {}'.format(iteration))

        held_out_margin = None
        if held_out and schedule.use_preference:
            held_out_margin = _held_out_margin(proxy, reference, list(held_out), schedule, beta,
                                               seed, iteration, threads)
            if metric_logger is not None and held_out_margin is not None:
                metric_logger.log(step=step, split=SplitTag.HELD_OUT,
                                  held_out_margin=held_out_margin)
        entry = AlignmentIteration(iteration=iteration,
                                   steps=iteration_steps,
                                   nll=float(np.mean(nlls)),
                                   dpo=_mean(dpos),
                                   margin=_mean(margins),
                                   skipped_pairs=skipped,
                                   held_out_margin=held_out_margin)
        log.iterations.append(entry)
        if skipped:
            logger.warning('Iteration {}: {} pair(s) skipped, proxy sample equals teacher '
                           'response'.format(iteration, skipped))
        logger.info('Alignment iteration {}: {}'.format(iteration, asdict(entry)))
        if log.converged:
            logger.info('Alignment converged after {} steps'.format(step))
            break

    log.total_steps = step
    return log


####################################
# Student distillation
####################################

# Modes whose soft labels are weighted by proxy confidence
WEIGHTED_MODES = [RunMode.PROXY_KD, RunMode.TAKD_UNALIGNED_PROXY, RunMode.PROXY_KD_NO_PREF]


@dataclass
class DistillResult():
    losses: List[float]
    curve: List[Tuple[int, float]]

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.curve[-1][1] if self.curve else None


def relabel_with_model(model: LanguageModel, examples: Sequence[Example],
                       threads: int = 1) -> List[Example]:
    '''
    Replaces each response with the greedy decode of ``model``, forcing a final EOS.
    '''

    def decode(e: Example) -> Example:
        if len(e.x) >= model.config.max_seq_len:
            raise ModeResourceError('Prompt "{}" leaves no room for a response'.format(e.id))
        y = greedy_decode(model, e.x, max_new=model.config.max_seq_len - len(e.x))
        if y[-1] != EOS_ID:
            y[-1] = EOS_ID
        return e.with_response(y)

    return ordered_map(decode, list(examples), threads=threads)


def _check_resources(mode, examples, source, stats, alpha):
    if mode not in RunMode.ALL:
        raise ModeResourceError('Unknown mode "{}", should be one of {}'.format(
            mode, RunMode.ALL))
    if mode == RunMode.VANILLA_BLACKBOX or alpha == 0:
        return
    if source is None:
        raise ModeResourceError('Mode "{}" needs a proxy or logit cache'.format(mode))
    if mode == RunMode.WHITE_BOX_FKL and not isinstance(source, LanguageModel):
        raise ModeResourceError('Mode "{}" needs a white-box model, got {}'.format(
            mode, type(source).__name__))
    if isinstance(source, LogitCacheFile):
        missing = [e.id for e in examples if e.id not in source]
        if missing:
            raise ModeResourceError('Logit cache lacks {} example(s) of d_s, e.g. "{}"'.format(
                len(missing), missing[0]))
    if mode in WEIGHTED_MODES:
        if stats is None:
            raise ModeResourceError('Mode "{}" needs weight statistics'.format(mode))
        missing = [e.id for e in examples if e.id not in stats.weights]
        if missing:
            raise ModeResourceError(
                'Weight statistics lack {} example(s) of d_s, e.g. "{}"'.format(
                    len(missing), missing[0]))


def distill_student(student: LanguageModel,
                    d_s: Sequence[Example],
                    source,
                    stats: Optional[WeightStats],
                    mode: str,
                    alpha: float,
                    steps: int,
                    batch_size: int = 16,
                    lr: float = 3e-4,
                    seed: int = 0,
                    kl_reduction: str = KLReduction.TOKEN_MEAN,
                    testset: Sequence[Example] = (),
                    spec: Optional[TaskSpec] = None,
                    eval_every: int = 200,
                    training_ids: Sequence[str] = (),
                    metric_logger: Optional[MetricLogger] = None,
                    threads: int = 1,
                    progress: bool = False) -> DistillResult:
    '''
    Trains the student on ``d_s`` with the loss of ``mode``:

    - ``proxy_kd``, ``takd_unaligned_proxy``, ``proxy_kd_no_pref``: NLL plus weighted KL against
      ``source`` (which proxy produced it is the caller's choice)
    - ``vanilla_blackbox``: NLL only
    - ``proxy_kd_no_weight``: as ``proxy_kd`` with every weight 1.0
    - ``white_box_fkl``: responses relabeled by the white-box ``source`` model's greedy decode,
      NLL plus unweighted full-vocabulary KL against it

    Every resource the mode needs is checked before the first step. When ``testset`` is given the
    student's accuracy is recorded every ``eval_every`` steps and after the last one.

    :param source: A :class:`LogitCacheFile` or a :class:`LanguageModel`
    '''
    examples = list(d_s)
    if not examples:
        raise SplitError('Distillation needs a non-empty d_s')
    if mode == RunMode.VANILLA_BLACKBOX:
        alpha = 0.0

    (examples, _) = drop_overlong(examples, student.config.max_seq_len, 'distillation')
    if not examples:
        raise SplitError('No example of d_s fits max_seq_len {}'.format(student.config.max_seq_len))
    _check_resources(mode, examples, source, stats, alpha)

    if mode == RunMode.WHITE_BOX_FKL:
        examples = relabel_with_model(source, examples, threads)
    if mode in (RunMode.PROXY_KD_NO_WEIGHT, RunMode.WHITE_BOX_FKL) or alpha == 0:
        stats = WeightStats.unit([e.id for e in examples])

    def loss_fn(batch):
        weights = [stats.weight(e.id) for e in batch]
        return student_loss_batch(student, batch, source, weights, alpha, kl_reduction)

    curve = []

    def evaluate(step):
        if not testset or spec is None:
            return
        if step % eval_every != 0 and step != steps:
            return
        accuracy = task_accuracy(student, testset, spec, training_ids, threads=threads)
        curve.append((step, accuracy))
        if metric_logger is not None:
            metric_logger.log(step=step, split=SplitTag.TEST, accuracy=accuracy)

    logger.info('Distilling student in mode "{}" (alpha={}) on {} examples for {} steps'.format(
        mode, alpha, len(examples), steps))
    if steps == 0:
        evaluate(0)
        return DistillResult([], curve)
    losses = train_steps(student, examples, loss_fn, steps, batch_size, seed, lr=lr,
                         metric_logger=metric_logger, on_step=evaluate, progress=progress)
    return DistillResult(losses, curve)
