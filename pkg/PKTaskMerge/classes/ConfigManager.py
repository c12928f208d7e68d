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

from dotenv import dotenv_values

from PKTaskMerge.classes.Singleton import SingletonType
from PKTaskMerge.classes.log import default_logger

ENV_FILE = ".env.dev"

# key -> (attribute, parser, default)
_SETTINGS = {
    "PKTASKMERGE_THREADS": ("threads", int, None),
    "PKTASKMERGE_EVAL_PARALLELISM": ("evaluatorParallelism", int, 1),
    "PKTASKMERGE_EVAL_TIMEOUT": ("evaluatorTimeout", float, None),
    "PKTASKMERGE_WORKSPACE": ("workspaceDir", str, None),
    "PKTASKMERGE_PROGRESS": ("showProgress", None, True),
    "PKTASKMERGE_LOG_LEVEL": ("logLevel", str, None),
}


def _parseBool(value):
    return str(value).strip().lower() in ("1", "true", "yes", "y", "on")


class tools(metaclass=SingletonType):
    """Runtime defaults. Values in `.env.dev` are read first, real environment
    variables override them and command line flags override both (through
    `override`)."""

    def __init__(self, envFile=ENV_FILE):
        super(tools, self).__init__()
        self.envFile = envFile
        self.threads = os.cpu_count() or 1
        self.evaluatorParallelism = 1
        self.evaluatorTimeout = None
        self.workspaceDir = None
        self.showProgress = True
        self.logLevel = None
        self.loadConfig()

    def loadConfig(self):
        local_values = dotenv_values(self.envFile) if os.path.isfile(self.envFile) else {}
        for key, (attribute, parser, default) in _SETTINGS.items():
            raw = os.environ.get(key, local_values.get(key))
            if raw is None or str(raw).strip() == "":
                continue
            try:
                value = _parseBool(raw) if parser is None else parser(raw)
            except ValueError as e:
                default_logger().debug(e, exc_info=True)
                default_logger().warn(f"Ignoring invalid value {raw!r} for {key}")
                continue
            setattr(self, attribute, value)
        self.threads = max(1, int(self.threads))
        self.evaluatorParallelism = max(1, int(self.evaluatorParallelism))
        return self

    def override(self, **kwargs):
        for attribute, value in kwargs.items():
            if value is None:
                continue
            if not hasattr(self, attribute):
                raise AttributeError(f"Unknown configuration field: {attribute}")
            setattr(self, attribute, value)
        return self

    def toDict(self):
        return {
            "threads": self.threads,
            "evaluatorParallelism": self.evaluatorParallelism,
            "evaluatorTimeout": self.evaluatorTimeout,
            "workspaceDir": self.workspaceDir,
            "showProgress": self.showProgress,
            "logLevel": self.logLevel,
        }
