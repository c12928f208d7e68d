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
import inspect
import logging
import os
import sys
import time
import warnings
from collections import OrderedDict
from collections.abc import Iterable
from functools import wraps
from itertools import chain
from threading import get_ident

from PKTaskMerge.classes.Singleton import SingletonType

__all__ = [
    "LOG_LEVEL_ENV",
    "setup_custom_logger",
    "default_logger",
    "log_to",
    "tracelog",
]

LOG_LEVEL_ENV = "PKTaskMerge_Default_Log_Level"
LOGGER_NAME = "PKTaskMerge"
__filter__ = None
__DEBUG__ = False


class emptylogger:
    """Stand-in returned by default_logger() while logging is not set up"""

    @property
    def logger(self):
        return None

    @property
    def level(self):
        return logging.NOTSET

    @property
    def isDebugging(self):
        return False

    def flush(self):
        return

    def addHandlers(self, log_file_path=None, levelname=logging.NOTSET):
        return None, None

    def debug(self, e, exc_info=False):
        return

    def info(self, line):
        return

    def warn(self, line):
        return

    def error(self, line):
        return

    def critical(self, line):
        return

    def setLevel(self, level):
        return


def _callerPrefix(depth=2):
    try:
        frame = inspect.stack()[depth]
        filename = os.path.basename(frame.filename)
        return f"{filename} - {frame.function} - {frame.lineno}"
    except Exception:
        return ""


class filterlogger(metaclass=SingletonType):
    def __init__(self, logger=None):
        super(filterlogger, self).__init__()
        self._logger = logger

    def __repr__(self):
        return f"LogLevel: {self.level}, isDebugging: {self.isDebugging}"

    @property
    def logger(self):
        return self._logger

    @property
    def level(self):
        return self.logger.level

    @level.setter
    def level(self, level):
        if level != self.level:
            self.logger.setLevel(level)
            self.debug(f"{self}\nCreated in thread: {get_ident()}")

    @property
    def isDebugging(self):
        return self.level == logging.DEBUG

    @staticmethod
    def getlogger(logger):
        if LOG_LEVEL_ENV not in os.environ.keys():
            return emptylogger()
        lgr = filterlogger(logger=logger)
        lgr.level = int(os.environ[LOG_LEVEL_ENV])
        return lgr

    def flush(self):
        for h in self.logger.handlers:
            h.flush()

    def addHandlers(self, log_file_path=None, levelname=logging.NOTSET):
        trace_formatter = logging.Formatter(
            fmt="\n%(asctime)s - %(name)s - %(levelname)s - %(threadName)s\n%(message)s\n"
        )
        # stdout belongs to --json output, so the console handler writes to stderr
        consolehandler = logging.StreamHandler(sys.stderr)
        consolehandler.setFormatter(trace_formatter)
        consolehandler.setLevel(levelname)
        self.logger.addHandler(consolehandler)
        filehandler = None
        if log_file_path is not None:
            filehandler = logging.FileHandler(log_file_path)
            filehandler.setFormatter(trace_formatter)
            filehandler.setLevel(levelname)
            self.logger.addHandler(filehandler)
        return consolehandler, filehandler

    def _emit(self, method, line, **kwargs):
        if __filter__ is None or __filter__ in line.upper():
            method(line, **kwargs)

    def debug(self, e, exc_info=False):
        if not self.isDebugging:
            return
        line = f"{_callerPrefix()}\n{e}"
        self._emit(self.logger.debug, line, exc_info=exc_info)

    def info(self, line):
        if self.level > logging.INFO or self.level == logging.NOTSET:
            return
        self._emit(self.logger.info, f"{_callerPrefix()}\n{line}")

    def warn(self, line):
        self._emit(self.logger.warning, str(line))

    def error(self, line):
        self.logger.error(line)

    def critical(self, line):
        self.logger.critical(line)

    def setLevel(self, level):
        self.logger.setLevel(level)


def setup_custom_logger(
    name=LOGGER_NAME,
    levelname=logging.DEBUG,
    log_file_path=None,
    filter=None,
):
    """Installs handlers on the package logger and exports the level through
    the environment so every thread's default_logger() picks it up."""
    global __filter__, __DEBUG__
    __filter__ = filter if filter is None else filter.upper()
    if isinstance(levelname, str):
        levelname = logging.getLevelName(levelname.upper())
    logger = logging.getLogger(name)
    logger.setLevel(levelname)
    for h in list(logger.handlers):
        logger.removeHandler(h)
        h.close()
    os.environ[LOG_LEVEL_ENV] = str(levelname)
    default_logger().addHandlers(log_file_path=log_file_path, levelname=levelname)
    __DEBUG__ = levelname == logging.DEBUG
    warnings.simplefilter("ignore", DeprecationWarning)
    default_logger().debug(f"PKTaskMerge: Logging started. Filter:{filter}")
    return logger


def default_logger():
    if LOG_LEVEL_ENV in os.environ.keys():
        return filterlogger.getlogger(logging.getLogger(LOGGER_NAME))
    return emptylogger()


def flatten(line):
    """Flatten a list (or other iterable) recursively"""
    for el in line:
        if isinstance(el, Iterable) and not isinstance(el, str):
            yield from flatten(el)
        else:
            yield el


def getargnames(func):
    spec = inspect.getfullargspec(func)
    return chain(flatten(spec.args), filter(None, [spec.varargs, spec.varkw]))


def getcallargs_ordered(func, *args, **kwargs):
    argdict = inspect.getcallargs(func, *args, **kwargs)
    return OrderedDict((name, argdict[name]) for name in getargnames(func))


def _shortRepr(value, limit=120):
    text = repr(value)
    return text if len(text) <= limit else text[: limit - 3] + "..."


def describe_call(func, *args, **kwargs):
    yield "Calling %s with args:" % func.__name__
    try:
        for argname, argvalue in getcallargs_ordered(func, *args, **kwargs).items():
            yield "\t%s = %s" % (argname, _shortRepr(argvalue))
    except TypeError:
        yield "\t<unbindable arguments>"


def log_to(logger_func):
    """A decorator to log every call to function (function name, arg values
    and time taken) while the package logger is at DEBUG.
    If logger_func is None, then the resulting decorator does nothing.
    """
    if logger_func is None:
        return lambda func: func

    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            if not __DEBUG__:
                return func(*args, **kwargs)
            description = "\n".join(describe_call(func, *args, **kwargs))
            logger_func(description)
            startTime = time.time()
            ret_val = func(*args, **kwargs)
            logger_func(
                "%s called: %.3f  (TIME_TAKEN)" % (func.__name__, time.time() - startTime)
            )
            return ret_val

        return wrapper

    return decorator


def trace_log(line):
    default_logger().debug(line)


tracelog = log_to(trace_log)
