"""Exception types shared across the package.

CLI exit-code mapping: usage errors -> 2, ``DataError`` (and subclasses)
-> 3, ``NumericError`` -> 4.
"""


class GraspError(Exception):
    """Base class for all package-specific errors."""


class DataError(GraspError):
    """Malformed, empty, or inconsistent input data."""


class ParseError(DataError):
    """A text input failed to parse; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class FormatError(DataError):
    """A binary file failed structural validation."""


class ProtocolError(GraspError):
    """The training/evaluation protocol cannot proceed (e.g. empty split)."""


class NumericError(GraspError):
    """Non-finite values encountered during optimization."""
