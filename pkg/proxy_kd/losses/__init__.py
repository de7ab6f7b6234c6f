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

from .objectives import LossConfig, PreferencePair, LossInputError, KLReduction, ProxyBatchLoss, \
    nll_loss, nll_loss_batch, forward_kl, truncated_kl, sort_entry_by_id, dpo_loss, \
    dpo_loss_batch, proxy_loss, proxy_loss_batch, student_loss, student_loss_batch, \
    DEFAULT_ALPHA, DEFAULT_BETA
from .weights import WeightStats, compute_weight_stats, weights_from_logliks, sigmoid, GAMMA_EPS
from .cases import gradient_cases
