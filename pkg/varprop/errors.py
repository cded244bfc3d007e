"""Error categories shared by the library, the CLI and the HTTP service."""
from typing import Optional


class VarpropError(Exception):
    """Base class for every categorized failure."""

    category: str = "error"
    exit_code: int = 1


class ConfigurationError(VarpropError, ValueError):
    category = "configuration"
    exit_code = 2


class DomainError(VarpropError, ValueError):
    category = "domain"
    exit_code = 3


class DimensionError(VarpropError, ValueError):
    category = "dimension"
    exit_code = 3


class InsufficientBatchError(VarpropError, ValueError):
    category = "insufficient-batch"
    exit_code = 3


class ConsistencyError(VarpropError):
    category = "consistency"
    exit_code = 4


class DegeneracyError(VarpropError, ArithmeticError):
    category = "degenerate"
    exit_code = 5


class DivergenceError(DegeneracyError):
    category = "divergence"


class DegenerateTraceError(DegeneracyError):
    category = "degenerate-trace"


class OutputError(VarpropError, OSError):
    """An artifact could not be written or read."""

    category = "io"
    exit_code = 6

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(f"{message}: {path}" if path else message)
        self.path = path
