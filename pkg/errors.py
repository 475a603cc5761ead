"""
Error Types (errors.py)

Every failure the toolkit reports on purpose is a SharkError subclass. Each
class carries the process exit code the command-line pipeline uses for it.
"""

from typing import Optional

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_VALIDATION = 5
EXIT_INTERNAL = 6
EXIT_METRIC = 7
EXIT_ORACLE = 8


class SharkError(Exception):
    exit_code = EXIT_UNEXPECTED


class ConfigurationError(SharkError):
    exit_code = EXIT_CONFIG


class DataIOError(SharkError):
    exit_code = EXIT_IO


class FormatError(SharkError):
    """Malformed store file or payload. `offset` is the byte position, when known."""
    exit_code = EXIT_FORMAT

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(SharkError):
    exit_code = EXIT_VALIDATION


class ParseError(ValidationError):
    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class RowLookupError(SharkError, IndexError):
    exit_code = EXIT_INTERNAL


class ShapeError(SharkError, ValueError):
    exit_code = EXIT_INTERNAL


class NumericError(SharkError, ValueError):
    exit_code = EXIT_INTERNAL


class UndefinedMetricError(SharkError):
    """AUC is undefined on a single-class dataset; the logloss is still attached."""
    exit_code = EXIT_METRIC

    def __init__(self, message: str, logloss: Optional[float] = None):
        super().__init__(message)
        self.logloss = logloss


class OracleRefusalError(SharkError):
    exit_code = EXIT_ORACLE
