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
import json
import sys
from contextlib import contextmanager

from alive_progress import alive_bar
from typing_extensions import Literal

from PKTaskMerge.classes.Singleton import SingletonType


class OutputControls(metaclass=SingletonType):
    """Routes human text to stderr and the single machine-readable document
    to stdout, so `--json` output can be piped."""

    def __init__(self, jsonMode=False, quiet=False):
        super(OutputControls, self).__init__()
        self.jsonMode = jsonMode
        self.quiet = quiet
        self.jsonEmitted = False

    def configure(self, jsonMode=None, quiet=None):
        if jsonMode is not None:
            self.jsonMode = jsonMode
        if quiet is not None:
            self.quiet = quiet
        self.jsonEmitted = False
        return self

    def printOutput(
        self,
        *values: object,
        sep: str = " ",
        end: str = "\n",
        flush: Literal[False] | bool = False,
    ) -> None:
        if self.quiet:
            return
        print(*values, sep=sep, end=end, flush=flush, file=sys.stderr)

    def printJson(self, document) -> None:
        if self.jsonEmitted:
            raise RuntimeError("Only one JSON document may be written per invocation")
        self.jsonEmitted = True
        sys.stdout.write(json.dumps(document, indent=2, sort_keys=False, default=_jsonDefault))
        sys.stdout.write("\n")
        sys.stdout.flush()

    def printError(self, error) -> None:
        print(error.toJson(), file=sys.stderr, flush=True)

    @contextmanager
    def progressBar(self, total, title=None, enabled=True):
        """Yields a callable that advances the bar; a no-op when disabled"""
        if not enabled or self.quiet or total <= 0:
            yield lambda *args, **kwargs: None
            return
        with alive_bar(
            total, title=title, file=sys.stderr, enrich_print=False, bar="smooth", spinner="dots_waves"
        ) as progressbar:
            yield progressbar


def _jsonDefault(value):
    # numpy arrays and scalars, and anything exposing toDict()
    if hasattr(value, "toDict"):
        return value.toDict()
    if hasattr(value, "tolist"):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
