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

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

from proxy_kd import config

T = TypeVar('T')
R = TypeVar('R')


def resolve_threads(threads: int = None) -> int:
    return max(1, int(threads if threads is not None else config.THREADS))


def ordered_map(fn: Callable[[T], R],
                items: Iterable[T],
                threads: int = None) -> List[R]:
    '''
    Applies ``fn`` to every item with at most ``threads`` workers, returning results in input order.
    '''
    threads = resolve_threads(threads)
    if threads == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
