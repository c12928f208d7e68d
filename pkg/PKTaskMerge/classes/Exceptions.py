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

# Exit codes used by the command line. Library callers can read .exitCode
# off any exception raised by this package.
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_EVALUATOR = 4
EXIT_INTERNAL = 5


class PKTaskMergeError(Exception):
    """Base class of every error raised by PKTaskMerge"""

    exitCode = EXIT_INTERNAL

    def __init__(self, message="", violations=None):
        super(PKTaskMergeError, self).__init__(message)
        self.message = message
        self.violations = list(violations) if violations is not None else []

    def toDict(self):
        return {
            "error": self.__class__.__name__,
            "code": self.exitCode,
            "message": self.message,
            "violations": self.violations,
        }

    def toJson(self):
        return json.dumps(self.toDict())


class RecipeValidationError(PKTaskMergeError, ValueError):
    exitCode = EXIT_VALIDATION

    def __init__(self, violations, message=None):
        violations = list(violations)
        if message is None:
            message = f"{len(violations)} validation error(s): " + "; ".join(violations)
        super(RecipeValidationError, self).__init__(message, violations=violations)


class PreconditionError(PKTaskMergeError, ValueError):
    """A caller passed arguments outside an operation's domain (keep <= 0, n > m, ...)"""

    exitCode = EXIT_VALIDATION


class CheckpointError(PKTaskMergeError, IOError):
    exitCode = EXIT_IO


class MalformedHeaderError(CheckpointError):
    pass


class TruncatedDataError(CheckpointError):
    pass


class DuplicateTensorError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError, KeyError):
    def __str__(self):
        return self.message


class UnsupportedDtypeError(CheckpointError):
    pass


class AlignmentError(PKTaskMergeError, ValueError):
    """Shapes, names or dtypes of two tensor collections do not line up"""

    exitCode = EXIT_IO

    def __init__(self, message, tensorName=None):
        if tensorName is not None:
            message = f"{tensorName}: {message}"
        super(AlignmentError, self).__init__(message)
        self.tensorName = tensorName


class EvaluatorError(PKTaskMergeError):
    exitCode = EXIT_EVALUATOR


class InvariantViolationError(PKTaskMergeError, AssertionError):
    exitCode = EXIT_INTERNAL
