"""Exception types shared across the package.

Input/format problems raise :class:`FormatError` or plain ``ValueError``;
numerical failures (non-finite tensors, diverged training) raise
:class:`NumericError`. The CLI maps the former to exit code 2 and the
latter to exit code 3.
"""


class LatentDbError(Exception):
    """Base class for package-specific errors."""


class FormatError(LatentDbError):
    """A file does not conform to its binary or JSON format."""


class NumericError(LatentDbError):
    """A computation produced non-finite values."""


class TrainingDiverged(NumericError):
    """Training hit a non-finite loss.

    Carries the last good model snapshot so callers can persist it.
    """

    def __init__(self, message, *, params=None, stats=None, log=None):
        super().__init__(message)
        self.params = params
        self.stats = stats
        self.log = log if log is not None else []
