"""
Error types shared by the library and the CLI.

Each error carries the process exit code the CLI reports for it.
"""
from typing import Optional


class PathRwkvError(Exception):
    """Base class for all library errors."""

    exit_code: int = 1


class ConfigError(PathRwkvError, ValueError):
    """Invalid or unknown configuration value."""

    exit_code = 1


class ContractError(PathRwkvError, ValueError):
    """A precondition of an operation was violated."""

    exit_code = 1


class DimensionError(ContractError):
    """Tensor shapes do not fit the operation."""


class FormatError(PathRwkvError):
    """
    A bag or checkpoint file could not be decoded.

    Attributes:
        offset: Byte offset at which decoding failed (None if not applicable)
    """

    exit_code = 2

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class EmptySlideError(PathRwkvError, ValueError):
    """A slide has no tiles left to process."""

    exit_code = 2


class DatasetError(PathRwkvError):
    """Dataset directory, manifest or record problem."""

    exit_code = 2


class NumericError(PathRwkvError, ArithmeticError):
    """Non-finite loss or another numeric breakdown during training."""

    exit_code = 3


class MetricError(PathRwkvError, ValueError):
    """A metric is undefined for the given inputs (constant or single-class)."""

    exit_code = 3


class PropertyFailure(PathRwkvError):
    """One or more verification properties failed."""

    exit_code = 4
