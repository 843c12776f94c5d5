"""Shared exception taxonomy.

Contract violations are caller bugs (bad shapes, invalid arguments),
domain errors are mathematically invalid inputs (log of a negative,
zero-vector normalization), evaluation errors are non-finite results
discovered mid-computation.
"""


class ContractViolation(ValueError):
    """An operation was called outside its documented contract."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of the operation."""


class EvaluationError(RuntimeError):
    """A computation produced a non-finite or otherwise unusable value."""
