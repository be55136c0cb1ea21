"""Exception types shared across the toolkit."""


class VaedmlError(Exception):
    """Base class for all toolkit errors."""


class SchemaError(VaedmlError):
    """Column set, role assignment, or layout does not match the contract."""


class ParseError(VaedmlError):
    """A cell could not be parsed; message names the row and column."""


class DuplicateKeyError(VaedmlError):
    """Repeated (firm, year) keys; message lists the offenders."""


class DomainError(VaedmlError):
    """An input violates a mathematical precondition (range, sign, size)."""


class DegenerateDataError(VaedmlError):
    """Data carries no usable variation (zero variance, singleton group)."""


class ConvergenceError(VaedmlError):
    """An iterative solver hit its cap or diverged; message has diagnostics."""


class NumericError(VaedmlError):
    """A non-finite value appeared mid-computation."""
