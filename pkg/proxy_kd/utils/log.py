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
import logging

from proxy_kd import config

LOG_FORMAT = '%(asctime)s %(name)s %(levelname)s %(message)s'
LOG_DATE_FORMAT = '%d-%b-%y %H:%M:%S'

# use module-level loggers by passing __name__
# as the name parameter to getLogger()
logger = logging.getLogger(__name__)


def configure_logging(process_name, logs_dir=None):
    """
    Configure all logging to a log file under ``logs_dir`` (when given) and to stderr
    ===
    %(asctime)s Human-readable time
    %(name)s Name of the logger used to log the call.
    """
    handlers = [logging.StreamHandler()]
    if logs_dir is not None:
        os.makedirs(logs_dir, exist_ok=True)
        handlers.append(
            logging.FileHandler('{}/{}.log'.format(logs_dir, process_name)))
    logging.basicConfig(
        # PROXY_KD_LOG_LEVEL=DEBUG for local development
        level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO),
        format=LOG_FORMAT,
        datefmt=LOG_DATE_FORMAT,
        handlers=handlers,
        force=True)
