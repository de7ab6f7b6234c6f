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
from setuptools import setup, find_packages

setup(name='proxy-kd',
      version='0.1.0',
      description='Distill a student from a black-box teacher through an aligned proxy',
      license='Apache',
      packages=find_packages(exclude=['tests', 'tests.*']),
      include_package_data=True,
      python_requires='>=3.7',
      install_requires=['numpy', 'msgpack', 'pandas', 'tqdm', 'tomli'],
      extras_require={
          'test': ['pytest'],
      },
      entry_points={
          'console_scripts': [
              'proxy-kd=proxy_kd.cli:main',
          ],
      },
      zip_safe=False)
