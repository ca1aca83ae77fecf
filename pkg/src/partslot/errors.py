"""Exception types shared across the package."""
from __future__ import annotations


class PartSlotError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PartSlotError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(PartSlotError, ValueError):
    """A configuration value or parameter registry is invalid."""


class ContractError(PartSlotError, ValueError):
    """A precondition of an operation was violated."""


class DomainError(PartSlotError, ArithmeticError):
    """Non-finite input or output where finite values are required."""


class NumericFailure(DomainError):
    """A loss term, or the encoder pass named ``"forward"``, went non-finite.

    ``step`` is filled in when the failure happens inside the training loop.
    """

    def __init__(self, term: str, step: int | None = None):
        where = "" if step is None else f" at step {step}"
        super().__init__(f"non-finite value in {term!r}{where}")
        self.term, self.step = term, step
