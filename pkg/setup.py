# -*- coding: utf-8 -*-
# """
#     The MIT License (MIT)

#     Copyright (c) 2023 pkjmesra

#     Permission is hereby granted, free of charge, to any person obtaining a copy
#     of this software and associated documentation files (the "Software"), to deal
#     in the Software without restriction, including without limitation the rights
#     to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
#     copies of the Software, and to permit persons to whom the Software is
#     furnished to do so, subject to the following conditions:

#     The above copyright notice and this permission notice shall be included in all
#     copies or substantial portions of the Software.

#     THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
#     IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
#     FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
#     AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
#     LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
#     OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
#     SOFTWARE.

"""
python setup.py clean build sdist bdist_wheel
"""
import sys

import setuptools
from setuptools import setup

from PKTaskMerge.classes import VERSION

__USERNAME__ = "pkjmesra"
__PACKAGENAME__ = "PKTaskMerge"
with open("README.md", "r") as fh:
    long_description = fh.read()
with open("requirements.txt", "r") as fh:
    install_requires = [line.split("#")[0].strip() for line in fh.read().splitlines() if line.split("#")[0].strip()]

SYS_MAJOR_VERSION = str(sys.version_info.major)

setup(
    name=__PACKAGENAME__,
    packages=setuptools.find_packages(where=".", exclude=["docs", "test", "examples", "examples.*"]),
    include_package_data=True,
    package_data={__PACKAGENAME__: ["release.md"]},
    exclude_package_data={"": ["*.yml"]},
    version=VERSION,
    description="Merge fine-tuned checkpoints through conflict-aware, n:m balanced sparse task vectors",
    long_description=long_description,
    long_description_content_type="text/markdown",
    author=__USERNAME__,
    author_email=__USERNAME__ + "@gmail.com",
    license="OSI Approved (MIT)",
    url="https://github.com/" + __USERNAME__ + "/" + __PACKAGENAME__,
    zip_safe=False,
    entry_points="""
    [console_scripts]
    pktaskmerge=PKTaskMerge.classes.cli:pktaskmerge
    """,
    classifiers=[
        "License :: OSI Approved :: MIT License",
        "Operating System :: Microsoft :: Windows",
        "Operating System :: MacOS",
        "Operating System :: POSIX :: Linux",
        "Programming Language :: Python",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
    ],
    install_requires=install_requires,
    python_requires=">=3.10",
    keywords=["model merging", "task vectors", "safetensors", "sparsity", "pruning"],
    test_suite="test",
)
