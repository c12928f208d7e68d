"""
    The MIT License (MIT)

    Copyright (c) 2023 pkjmesra

    Permission is hereby granted, free of charge, to any person obtaining a copy
    of this software and associated documentation files (the "Software"), to deal
    in the Software without restriction, including without limitation the rights
    to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
    copies of the Software, and to permit persons to whom the Software is
    furnished to do so, subject to the following conditions:

    The above copyright notice and this permission notice shall be included in all
    copies or substantial portions of the Software.

    THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
    IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
    FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
    AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
    LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
    OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
    SOFTWARE.

"""
import os
import tempfile

from PKTaskMerge.classes.log import default_logger


def safe_open_w(path):
    """Creates any parent directories of "path" as needed."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    return path


def get_user_outputs_dir(rootDir=None):
    # All outputs go under ./results unless a workspace is configured
    resultsDir = os.path.join(os.getcwd(), "results") if rootDir is None else rootDir
    os.makedirs(resultsDir, exist_ok=True)
    return resultsDir


def get_user_reports_dir(rootDir=None):
    resultsDir = get_user_outputs_dir(rootDir)
    reportsDir = os.path.join(resultsDir, "Reports")
    os.makedirs(reportsDir, exist_ok=True)
    return reportsDir


def get_user_temp_dir(rootDir=None, prefix="search-"):
    """A fresh scratch directory for intermediate merged checkpoints"""
    resultsDir = get_user_outputs_dir(rootDir)
    tempRoot = os.path.join(resultsDir, "DeleteThis")
    os.makedirs(tempRoot, exist_ok=True)
    return tempfile.mkdtemp(prefix=prefix, dir=tempRoot)


def removeDirIfEmpty(path):
    try:
        os.rmdir(path)
        return True
    except OSError as e:
        default_logger().debug(e, exc_info=True)
        return False
