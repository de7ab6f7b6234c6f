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

from .dataset import Example, ExampleSplit, SplitCorpus, CorpusFormatError, SplitError, \
    split_corpus, split_sizes, drop_overlong, load_jsonl, save_jsonl, stage_scope, current_stage, \
    DEFAULT_FRACTIONS
from .tasks import Vocab, TaskSpec, DEFAULT_VOCAB, InsufficientPromptSpaceError, \
    MalformedPromptError, generate_task_corpus, ground_truth, prompt_space_size, \
    encode_prompt, encode_response, prompt_text
