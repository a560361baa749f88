"""Exception hierarchy shared by every qinfer module."""

from __future__ import annotations


class QInferError(Exception):
    """Base class for all library errors."""


class ConfigurationError(QInferError, ValueError):
    """Shapes, descriptors or settings that do not fit together."""


class DomainError(QInferError, ValueError):
    """An argument outside the domain of an operation (empty input, bad count)."""


class FormatError(QInferError, ValueError):
    """A binary file whose header does not match what was expected."""


class LengthError(FormatError):
    """A binary payload shorter than its header promises."""


class SingularSystemError(QInferError, ArithmeticError):
    """Normal-equation matrix is numerically singular."""

    def __init__(self, message: str, condition_number: float):
        super().__init__(f"{message} (condition number {condition_number:.3e})")
        self.condition_number = condition_number


class CapabilityError(QInferError, PermissionError):
    """A consumer asked for information hidden behind the aggregation boundary."""


class ValidationError(QInferError, ValueError):
    """Experiment configuration failed validation; carries every violation."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.violations))
