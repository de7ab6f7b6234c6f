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
import os
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from proxy_kd.constants import RunMode
from .log import MetricLog, SplitTag

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 2
ACCURACY_METRIC = 'accuracy'


class MissingMetricLogError(FileNotFoundError):

    def __init__(self, run_ids: Sequence[str]):
        self.run_ids = sorted(run_ids)
        super().__init__('Missing metric logs for run(s): {}'.format(', '.join(self.run_ids)))


@dataclass
class ReportCell():
    accuracies: List[float] = field(default_factory=list)
    run_ids: List[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def describe(self) -> str:
        return '{:.4f} ± {:.4f}'.format(self.mean, self.std)


def row_label(mode: str, proxy_size: str = '') -> str:
    return '{} [proxy {}]'.format(mode, proxy_size) if proxy_size else mode


def _size_key(proxy_size: str):
    return tuple(int(n) for n in proxy_size.split('x')) if proxy_size else ()


class ComparisonReport():
    '''
    Final student accuracy per row and task (columns), as mean ± std over seeds. A row is a run
    mode, split by proxy size when runs carry one, so proxy-capacity sweeps sit side by side.
    '''

    def __init__(self):
        self._cells: Dict[tuple, ReportCell] = {}

    def add(self, mode: str, task: str, run_id: str, accuracy: float, proxy_size: str = ''):
        cell = self._cells.setdefault((mode, proxy_size, task), ReportCell())
        cell.accuracies.append(float(accuracy))
        cell.run_ids.append(run_id)

    def cell(self, mode: str, task: str, proxy_size: str = '') -> ReportCell:
        return self._cells[(mode, proxy_size, task)]

    @property
    def rows(self) -> List[Tuple[str, str]]:
        present = {(mode, size) for (mode, size, _) in self._cells}
        return sorted(present, key=lambda r: (RunMode.ALL.index(r[0]), _size_key(r[1])))

    @property
    def modes(self) -> List[str]:
        present = {mode for (mode, _, _) in self._cells}
        return [m for m in RunMode.ALL if m in present]

    @property
    def proxy_sizes(self) -> List[str]:
        return sorted({size for (_, size, _) in self._cells if size}, key=_size_key)

    @property
    def tasks(self) -> List[str]:
        return sorted({task for (_, _, task) in self._cells})

    @property
    def shape(self):
        return (len(self.rows), len(self.tasks))

    def to_frame(self) -> pd.DataFrame:
        rows = [[
            self._cells[(m, s, t)].describe() if (m, s, t) in self._cells else ''
            for t in self.tasks
        ] for (m, s) in self.rows]
        index = pd.Index([row_label(m, s) for (m, s) in self.rows], name='mode')
        return pd.DataFrame(rows, index=index, columns=self.tasks)

    def to_jsonable(self) -> dict:
        cells = []
        for (m, s) in self.rows:
            for t in self.tasks:
                cell = self._cells.get((m, s, t))
                if cell is None:
                    continue
                cells.append({
                    'mode': m,
                    'proxy_size': s,
                    'task': t,
                    'mean': cell.mean,
                    'std': cell.std,
                    'n': len(cell.accuracies),
                    'accuracies': cell.accuracies,
                    'run_ids': cell.run_ids
                })
        return {
            'schema_version': REPORT_SCHEMA_VERSION,
            'modes': self.modes,
            'proxy_sizes': self.proxy_sizes,
            'tasks': self.tasks,
            'cells': cells
        }


def _load_manifest(path: str) -> dict:
    with open(path, encoding='utf-8') as f:
        return json.load(f)


def emit_report(manifest_paths: Sequence[str], output_dir: str) -> ComparisonReport:
    '''
    Builds the comparison table from the metric logs the manifests point at and writes
    ``report.csv``, ``report.json`` and one learning-curve CSV per run under ``curves/``.
    '''
    if not manifest_paths:
        raise ValueError('Report needs at least one manifest')

    runs = []
    missing = []
    for path in manifest_paths:
        manifest = _load_manifest(path)
        if manifest.get('status') != 'complete':
            raise ValueError('Manifest "{}" is not complete (status "{}")'.format(
                path, manifest.get('status')))
        base_dir = os.path.dirname(os.path.abspath(path))
        for run in manifest['runs']:
            metrics_path = os.path.join(base_dir, run['metrics_path'])
            if not os.path.exists(metrics_path):
                missing.append(run['run_id'])
            else:
                runs.append((run, metrics_path))
    if missing:
        raise MissingMetricLogError(missing)

    report = ComparisonReport()
    curves = {}
    for (run, metrics_path) in sorted(runs, key=lambda r: r[0]['run_id']):
        run_id = run['run_id']
        if run_id in curves:
            raise ValueError('Run id "{}" appears in more than one manifest'.format(run_id))
        frame = MetricLog.load(metrics_path).to_frame()
        curve = frame[(frame.metric == ACCURACY_METRIC) & (frame.split == SplitTag.TEST)]
        curve = curve.sort_values('step')[['step', 'value']].rename(
            columns={'value': ACCURACY_METRIC})
        if curve.empty:
            raise MissingMetricLogError([run_id])
        curves[run_id] = curve.reset_index(drop=True)
        report.add(run['mode'], run['task'], run_id, curve[ACCURACY_METRIC].iloc[-1],
                   run.get('proxy_size', ''))

    curves_dir = os.path.join(output_dir, 'curves')
    os.makedirs(curves_dir, exist_ok=True)
    for (run_id, curve) in curves.items():
        curve.to_csv(os.path.join(curves_dir, '{}.csv'.format(run_id)), index=False)
    report.to_frame().to_csv(os.path.join(output_dir, 'report.csv'))
    with open(os.path.join(output_dir, 'report.json'), 'w', encoding='utf-8') as f:
        json.dump(report.to_jsonable(), f, indent=2, sort_keys=True)

    logger.info('Report over {} run(s):\n{}'.format(len(curves), report.to_frame().to_string()))
    return report
