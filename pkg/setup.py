# Copyright 2021 SNOW toolbox developers

# Licensed under the Apache License, Version 2.0 (the "License"); you may not use
# this file except in compliance with the License. You may obtain a copy of the
# License at http://www.apache.org/licenses/LICENSE-2.0

# Unless required by applicable law or agreed to in writing, software distributed
# under the License is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR
# CONDITIONS OF ANY KIND, either express or implied. See the License for the
# specific language governing permissions and limitations under the License.

"""The setup script."""

import io
import os

from setuptools import find_packages, setup

# Package meta-data.
NAME = 'snow-toolbox'
DESCRIPTION = 'Annotation noise, evaluation and early stopping for nuclei instance segmentation.'
URL = 'https://github.com/snow-toolbox/SNOW_toolbox'
AUTHOR = 'SNOW toolbox developers'
REQUIRES_PYTHON = '>=3.9'
VERSION = '1.0.0'

# These packages are required for all of the code to be executed.
REQUIRED = [
    'matplotlib',
    'numpy',
    'pytest',
    'scipy',
    'pyYAML',
    'pandas>=1.5',
]

# Read the docs, one day, so we'll throw it in here!
EXTRAS = {
    'docs': {
        'readthedocs-sphinx-ext>=0.5.15',
        'Sphinx>=2.0',
        'sphinxcontrib-napoleon>=0.7'
    }
}

here = os.path.abspath(os.path.dirname(__file__))

# Import the README and use it as the long-description.
try:
    with io.open(os.path.join(here, 'README.md'), encoding='utf-8') as f:
        long_description = '\n' + f.read()
except FileNotFoundError:
    long_description = DESCRIPTION


metadata = dict(
    name                          = NAME,
    version                       = VERSION,
    description                   = DESCRIPTION,
    long_description              = long_description,
    long_description_content_type = 'text/markdown',
    author                        = AUTHOR,
    url                           = URL,
    install_requires              = REQUIRED,
    python_requires               = REQUIRES_PYTHON,
    extras_require                = EXTRAS,
    include_package_data          = True,
    packages                      = find_packages(exclude=["SNOW_testing", "Examples", "Noise_Cases", "docs"]),
    entry_points                  = {'console_scripts': ['snow = SNOW_toolbox.cli:main']},
    license                       = 'Apache License, Version 2.0',
    zip_safe                      = False,
)

setup(**metadata)
