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

from .knob import BaseKnob, IntegerKnob, FloatKnob, BooleanKnob, CategoricalKnob, ListKnob, \
    InvalidConfigError, PUBLISHED_DEFAULT, DESK_SCALE
from .config import ExperimentConfig, KNOBS, ALIASES, WhiteBoxSource, Precision, parse_override, \
    parse_overrides, describe_knobs
from .trainer import train_steps, train_step, epoch_batches, iterate_batches, steps_per_epoch
from .stages import AlignmentSchedule, AlignmentIteration, AlignmentLog, DistillResult, \
    StageError, ModeResourceError, TeacherQualityError, ReferenceDriftError, train_teacher, \
    label_corpus, warmup_proxy, align_proxy, sample_pairs, distill_student, relabel_with_model
from .experiment import RunManifest, RunStatus, ProxyVariant, OutputExistsError, MODE_PROXY, \
    MANIFEST_FILE, run_experiment, plan_stages, print_plan, proxy_variants, cached_variants, \
    resolve_white_box_source, prepare_output_dir
