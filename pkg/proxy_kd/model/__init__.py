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

from .transformer import ModelConfig, LanguageModel, ModelInputError, forward, response_logits, \
    response_logits_batch, token_log_probs, token_log_probs_batch, sequence_log_prob, \
    sequence_log_prob_batch, sample, greedy_decode, next_token, pad_responses
from .checkpoint import CheckpointStore, FileCheckpointStore, CheckpointFormatError, \
    encode_checkpoint, decode_checkpoint, save_checkpoint, load_checkpoint, model_hash
