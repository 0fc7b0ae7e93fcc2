"""Exception types raised across the package."""

from __future__ import annotations


class OpenDGError(Exception):
    """Base class for all package errors."""


class DimensionError(OpenDGError, ValueError):
    pass


class PreconditionError(OpenDGError, ValueError):
    pass


class ConfigError(OpenDGError, ValueError):
    pass


class ValidationError(OpenDGError, ValueError):
    pass


class ParseError(OpenDGError, ValueError):
    """Raised when a dataset file holds a non-numeric field."""

    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(message)
        self.line = line


class FormatError(OpenDGError, ValueError):
    pass
