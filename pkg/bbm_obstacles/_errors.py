from __future__ import annotations

from typing import Any


class BbmError(Exception):
    """Base class of all errors raised by bbm_obstacles."""


class ConfigError(BbmError, ValueError):
    """Invalid parameters or unreadable configuration."""


class DomainError(BbmError, ValueError):
    """An operation was called outside of its mathematical domain."""


class QueryError(BbmError, LookupError):
    """An observable was requested for a time that was not observed."""


class TruncationError(BbmError, RuntimeError):
    """The particle cap was exceeded.

    The partial results are attached; a truncated run must not enter
    unbiased statistics.
    """

    def __init__(self, message: str, curve: Any = None, log: Any = None) -> None:
        super().__init__(message)
        self.curve = curve
        self.log = log

    def __reduce__(self) -> Any:
        return (type(self), (str(self), self.curve, self.log))
