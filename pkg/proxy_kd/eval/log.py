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
from datetime import datetime
from typing import List, NamedTuple, Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

METRIC_LOG_DATETIME_FORMAT = '%Y-%m-%dT%H:%M:%S'


class DuplicateMetricError(ValueError):
    pass


class LogType():
    METRICS = 'METRICS'
    MESSAGE = 'MESSAGE'


class SplitTag():
    TRAIN = 'train'
    TEST = 'test'
    HELD_OUT = 'held_out'


class MetricRecord(NamedTuple):
    run: str
    step: int
    split: str
    metric: str
    value: float


class MetricLog():
    '''
    Append-only table of metric records; ``(run, step, metric)`` is unique.
    '''

    COLUMNS = list(MetricRecord._fields)

    def __init__(self, records=()):
        self._records: List[MetricRecord] = []
        self._keys = set()
        for record in records:
            self.append(record)

    def __len__(self):
        return len(self._records)

    @property
    def records(self) -> List[MetricRecord]:
        return list(self._records)

    def append(self, record: MetricRecord):
        key = (record.run, record.step, record.metric)
        if key in self._keys:
            raise DuplicateMetricError(
                'Metric "{}" already logged for run "{}" at step {}'.format(
                    record.metric, record.run, record.step))
        self._keys.add(key)
        self._records.append(record)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self._records, columns=self.COLUMNS)

    def save(self, path: str):
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def load(cls, path: str) -> 'MetricLog':
        frame = pd.read_csv(path, dtype={'run': str, 'split': str, 'metric': str})
        return cls(
            MetricRecord(r.run, int(r.step), r.split, r.metric, float(r.value))
            for r in frame.itertuples(index=False))


class MetricLogger():
    '''
    Logs messages and metrics during training.

    Every call emits one JSON line to the Python logger. When bound to a :class:`MetricLog`,
    metrics logged with a ``step`` are also appended as records of ``run``.

    For example:

    ::

        metric_logger = MetricLogger('proxy_kd-0', MetricLog())
        metric_logger.log('Starting distillation...')
        metric_logger.log(step=1, loss=2.3)
        metric_logger.log(step=200, split='test', accuracy=0.4)

    '''

    def __init__(self,
                 run: str,
                 metric_log: Optional[MetricLog] = None,
                 split: str = SplitTag.TRAIN,
                 py_logger: Optional[logging.Logger] = None):
        self.run = run
        self.metric_log = metric_log
        self._split = split
        self._logger = py_logger or logger

    def log(self, msg='', step: Optional[int] = None, split: Optional[str] = None, **metrics):
        '''
        Logs a message and/or a set of metrics at a single point in time.

        :param str msg: Message to be logged
        :param step: Step the metrics belong to; required to record them in the metric log
        :param split: Split tag of the metrics, defaulting to the logger's
        :param metrics: Set of metrics & their values to be logged as ``{ <metric>: <value> }``
        '''
        if msg:
            self._log(LogType.MESSAGE, {'run': self.run, 'message': str(msg)})

        if metrics:
            metrics = self._validate_metrics(metrics)
            split = split or self._split
            self._log(LogType.METRICS, {'run': self.run, 'step': step, 'split': split, **metrics})
            if self.metric_log is not None and step is not None:
                for (name, value) in metrics.items():
                    self.metric_log.append(MetricRecord(self.run, int(step), split, name,
                                                        float(value)))

    def _validate_metrics(self, metrics):
        return {n: self._validate_metric(n, v) for (n, v) in metrics.items()}

    def _log(self, log_type, log_dict):
        log_dict['type'] = log_type
        log_dict['time'] = datetime.now().strftime(METRIC_LOG_DATETIME_FORMAT)
        self._logger.info(json.dumps(log_dict))

    def _validate_metric(self, name, value):
        if isinstance(value, np.integer):
            return int(value)
        elif isinstance(value, np.floating):
            return float(value)

        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(
                'Metric of name "{}" should be an `int` or `float`, but is of `{}`'
                .format(name, type(value)))

        return value

    @staticmethod
    # Parses a logged line into a dictionary.
    def parse_log_line(log_line):
        try:
            return json.loads(log_line)
        except ValueError:
            # An unserializable log line is a message
            return {'type': LogType.MESSAGE, 'message': log_line}
