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

import os

# Global
OUTPUT_ROOT = os.environ.get('PROXY_KD_OUTPUT_ROOT', 'runs')
LOG_LEVEL = os.environ.get('PROXY_KD_LOG_LEVEL', 'INFO')
TEST_MODE = os.environ.get('PROXY_KD_TEST_MODE', '0') == '1'
THREADS = int(os.environ.get('PROXY_KD_THREADS', '1'))
