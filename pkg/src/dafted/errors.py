"""Exception types shared across the package."""


class DaftedError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(DaftedError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(DaftedError, ValueError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class DegenerateInputError(DaftedError, ValueError):
    """Input is mathematically degenerate (e.g. zero-norm vector fed to a
    cosine similarity)."""


class NumericsError(DaftedError, RuntimeError):
    """A forward pass produced non-finite values."""


class SchemaError(DaftedError, ValueError):
    """A record or file does not match the declared tabular schema."""


class StratificationError(DaftedError, ValueError):
    """A class is too small to stratify at the requested fractions."""


class MetricError(DaftedError, ValueError):
    """A metric cannot be computed on the given inputs (e.g. absent class)."""


class DegenerateVarianceError(DaftedError, ValueError):
    """A statistical test is undefined because the variance is zero."""


class ConfigError(DaftedError, ValueError):
    """A run configuration is malformed or inconsistent."""


class TrainingAbort(DaftedError, RuntimeError):
    """Training hit a numerical failure; carries the offending component."""

    def __init__(self, message: str, component: str = "unknown"):
        super().__init__(message)
        self.component = component
