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

from enum import Enum

# Special token ids, shared by every vocabulary
PAD_ID = 0
BOS_ID = 1
EOS_ID = 2

# Test prompts are drawn from a seed range no training stage uses
TEST_SEED_OFFSET = 1000003
TEACHER_SEED_OFFSET = 2000003


class Jsonable:

    @classmethod
    def from_jsonable(cls, jsonable) -> object:
        return cls(**jsonable)

    def to_jsonable(self) -> any:
        jsonable = self.__dict__.copy()

        # Convert all nested jsonables & enums
        for (name, value) in jsonable.items():
            if isinstance(value, Jsonable):
                jsonable[name] = value.to_jsonable()
            elif isinstance(value, Enum):
                jsonable[name] = value.value

        return jsonable

    def __str__(self):
        return str(self.to_jsonable())


class ModelRole:
    STUDENT = 'student'
    PROXY = 'proxy'
    TEACHER = 'teacher'

    ALL = [STUDENT, PROXY, TEACHER]


class TaskName:
    MODADD = 'modadd'
    COPY = 'copy'
    REVERSE = 'reverse'
    SORTDIGITS = 'sortdigits'

    ALL = [MODADD, COPY, REVERSE, SORTDIGITS]


class TeacherBackend:
    PROGRAMMATIC = 'programmatic'
    TRANSFORMER = 'transformer'

    ALL = [PROGRAMMATIC, TRANSFORMER]


class RunMode:
    PROXY_KD = 'proxy_kd'
    VANILLA_BLACKBOX = 'vanilla_blackbox'
    WHITE_BOX_FKL = 'white_box_fkl'
    TAKD_UNALIGNED_PROXY = 'takd_unaligned_proxy'
    PROXY_KD_NO_PREF = 'proxy_kd_no_pref'
    PROXY_KD_NO_WEIGHT = 'proxy_kd_no_weight'

    # Report row order
    ALL = [
        PROXY_KD, VANILLA_BLACKBOX, WHITE_BOX_FKL, TAKD_UNALIGNED_PROXY,
        PROXY_KD_NO_PREF, PROXY_KD_NO_WEIGHT
    ]


class Stage:
    GENERATE = 'generate'
    TRAIN_TEACHER = 'train_teacher'
    LABEL = 'label'
    SPLIT = 'split'
    WARMUP = 'warmup'
    ALIGN = 'align'
    CACHE = 'cache'
    STATS = 'stats'
    DISTILL = 'distill'
    EVAL = 'eval'

    ALL = [
        GENERATE, TRAIN_TEACHER, LABEL, SPLIT, WARMUP, ALIGN, CACHE, STATS,
        DISTILL, EVAL
    ]


class SplitName:
    D_W = 'd_w'
    D_P = 'd_p'
    D_S = 'd_s'


class ExitCode:
    SUCCESS = 0
    USAGE = 2
    VALIDATION = 3
    RUNTIME = 4
