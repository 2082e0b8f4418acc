"""Exception types raised across the package."""


class ShuffleDPError(Exception):
    """Base class for all package errors."""


class PreconditionError(ShuffleDPError, ValueError):
    """An input lies outside the range an operation is defined for."""


class DomainError(ShuffleDPError, ValueError):
    """A data row lies outside the protocol's data universe."""


class FormatError(ShuffleDPError, ValueError):
    """A transcript contains a message the analyzer cannot interpret."""


class EnumerationBudgetError(ShuffleDPError):
    """Exact enumeration would exceed the configured size limits."""


class IndeterminateResult(ShuffleDPError):
    """The analyzer could not single out an answer from the transcript."""


class UncalibratedError(ShuffleDPError):
    """A test was run before its decision threshold was calibrated."""
