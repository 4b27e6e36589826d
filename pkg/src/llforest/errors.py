"""Exception hierarchy shared across the package."""


class LLFError(Exception):
    """Base class for all package errors."""


class SchemaError(LLFError, ValueError):
    """A required column is missing or columns do not line up."""


class ParseError(LLFError, ValueError):
    """A CSV cell could not be parsed as a finite number."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class SizeError(LLFError, ValueError):
    """Too few rows, or a sample size that does not fit."""


class ConfigError(LLFError, ValueError):
    """Invalid forest, tuning or simulation configuration."""


class DimensionError(LLFError, ValueError):
    """Test point dimension does not match the training data."""


class NoNeighborsError(LLFError, RuntimeError):
    """The forest kernel puts zero weight on every training point."""


class RankError(LLFError, RuntimeError):
    """A local regression system is singular; try a larger ridge penalty."""


class OverlapError(LLFError, ValueError):
    """All units are treated or all are controls."""
