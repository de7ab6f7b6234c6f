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

from .tensor import Tensor, Tape, Node, no_grad, backward, zero_grad, as_tensor, \
    set_test_mode, is_test_mode, get_dtype, test_mode, \
    add, sub, mul, div, neg, exp, log, sigmoid, log_sigmoid, gelu, matmul, embedding, \
    gather, getitem, reshape, transpose, reduce_sum, reduce_mean, softmax, log_softmax, \
    layer_norm, causal_attention_scores, MASK_VALUE, \
    ShapeError, NonFiniteError, NonScalarLossError, DetachedLossError
from .optim import AdamState, Adam, adam_step, MissingGradientError, DEFAULT_LEARNING_RATE
from .gradcheck import GradientCase, check_gradients, run_gradient_suite, primitive_cases, \
    relative_error, GRADCHECK_TOLERANCE
