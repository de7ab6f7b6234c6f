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

import abc
from typing import Any, List, Optional, Union

PUBLISHED_DEFAULT = 'published default'
DESK_SCALE = 'desk-scale'


class InvalidConfigError(ValueError):
    pass


KnobValue = Union[str, int, float, bool, list]


class BaseKnob(abc.ABC):
    '''
        The base class for a config key: its type, default, allowed values and where the default comes from.
    '''

    def __init__(self, default, help: str = '', provenance: str = DESK_SCALE):
        self._help = help
        self._provenance = provenance
        self._default = default

    # Data type of a realized value of this knob
    @property
    def value_type(self) -> type:
        raise NotImplementedError()

    @property
    def default(self):
        return self._default

    @property
    def help(self) -> str:
        return self._help

    @property
    def provenance(self) -> str:
        return self._provenance

    @abc.abstractmethod
    def validate(self, name: str, value: Any) -> KnobValue:
        '''
            Coerces ``value`` to this knob's type, raising ``InvalidConfigError`` when it does not fit.
        '''
        raise NotImplementedError()

    def describe(self) -> str:
        return '{} (default {!r}, {})'.format(self._help, self._default,
                                              self._provenance)

    def _type_error(self, name, value):
        return InvalidConfigError('`{}` should be a `{}`, but is {!r}'.format(
            name, self.value_type.__name__, value))


class IntegerKnob(BaseKnob):
    '''
    Knob type representing an ``int`` value within a specific interval [``value_min``, ``value_max``].
    '''

    def __init__(self,
                 default: int,
                 value_min: int,
                 value_max: int,
                 help: str = '',
                 provenance: str = DESK_SCALE):
        if value_min > value_max:
            raise ValueError('`value_max` should be at least `value_min`')
        super().__init__(default, help, provenance)
        self._value_min = value_min
        self._value_max = value_max

    @property
    def value_type(self):
        return int

    @property
    def value_min(self) -> int:
        return self._value_min

    @property
    def value_max(self) -> int:
        return self._value_max

    def validate(self, name, value):
        if isinstance(value, bool) or not isinstance(value, int):
            raise self._type_error(name, value)
        if not self._value_min <= value <= self._value_max:
            raise InvalidConfigError('`{}` should be in [{}, {}], but is {}'.format(
                name, self._value_min, self._value_max, value))
        return value


class FloatKnob(BaseKnob):
    '''
        Knob type representing a ``float`` value within a specific interval [``value_min``, ``value_max``].
        ``exclusive_min`` makes the lower bound open.
    '''

    def __init__(self,
                 default: float,
                 value_min: float,
                 value_max: float,
                 exclusive_min: bool = False,
                 help: str = '',
                 provenance: str = DESK_SCALE):
        if value_min > value_max:
            raise ValueError('`value_max` should be at least `value_min`')
        super().__init__(float(default), help, provenance)
        self._value_min = float(value_min)
        self._value_max = float(value_max)
        self._exclusive_min = exclusive_min

    @property
    def value_type(self):
        return float

    @property
    def value_min(self) -> float:
        return self._value_min

    @property
    def value_max(self) -> float:
        return self._value_max

    def validate(self, name, value):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise self._type_error(name, value)
        value = float(value)
        too_low = value <= self._value_min if self._exclusive_min else value < self._value_min
        if too_low or value > self._value_max:
            raise InvalidConfigError('`{}` should be in {}{}, {}], but is {}'.format(
                name, '(' if self._exclusive_min else '[', self._value_min,
                self._value_max, value))
        return value


class BooleanKnob(BaseKnob):

    @property
    def value_type(self):
        return bool

    def validate(self, name, value):
        if not isinstance(value, bool):
            raise self._type_error(name, value)
        return value


class CategoricalKnob(BaseKnob):
    '''
        Knob type representing one of a fixed list of ``str`` values.
    '''

    def __init__(self,
                 default: str,
                 values: List[str],
                 help: str = '',
                 provenance: str = DESK_SCALE):
        if len(values) == 0:
            raise ValueError('Length of `values` should at least 1')
        super().__init__(default, help, provenance)
        self._values = list(values)

    @property
    def value_type(self):
        return str

    @property
    def values(self) -> list:
        return self._values

    def validate(self, name, value):
        if value not in self._values:
            raise InvalidConfigError('`{}` should be one of {}, but is {!r}'.format(
                name, self._values, value))
        return value


class ListKnob(BaseKnob):
    '''
        Knob type representing a list whose items each satisfy ``item_knob``.
        ``length`` fixes the list length.
    '''

    def __init__(self,
                 default: list,
                 item_knob: BaseKnob,
                 length: Optional[int] = None,
                 min_length: int = 1,
                 unique: bool = False,
                 help: str = '',
                 provenance: str = DESK_SCALE):
        super().__init__(list(default), help, provenance)
        self._item_knob = item_knob
        self._length = length
        self._min_length = min_length
        self._unique = unique

    @property
    def value_type(self):
        return list

    def validate(self, name, value):
        if not isinstance(value, (list, tuple)):
            raise self._type_error(name, value)
        items = [
            self._item_knob.validate('{}[{}]'.format(name, i), v)
            for (i, v) in enumerate(value)
        ]
        if self._length is not None and len(items) != self._length:
            raise InvalidConfigError('`{}` should have {} items, but has {}'.format(
                name, self._length, len(items)))
        if len(items) < self._min_length:
            raise InvalidConfigError('`{}` should have at least {} item(s)'.format(
                name, self._min_length))
        if self._unique and len(set(items)) != len(items):
            raise InvalidConfigError('`{}` should not repeat items'.format(name))
        return items
