"""Exception hierarchy shared by every service.

Services raise; command handlers catch ``HazardError`` and turn it into the
result dictionary and exit code the command line reports.
"""
from __future__ import annotations

from constants import EXIT_DATA, EXIT_NUMERICAL


class HazardError(Exception):
    exit_code: int = EXIT_NUMERICAL


# ── Data problems (exit 2) ───────────────────────────────────────────────────

class DataError(HazardError):
    exit_code = EXIT_DATA


class SchemaError(DataError):
    """Panel file or in-memory panel violates the documented schema."""


class ZeroVarianceError(DataError):
    """A covariate column is constant and must be dropped by the caller."""


class KernelSpecError(DataError):
    """Kernel definition does not fit the dataset it is applied to."""


class FoldPlanError(DataError):
    pass


class NoEventsError(DataError):
    pass


class PositivityError(DataError):
    """A treatment class is absent from the person-time of a split."""


# ── Numerical problems (exit 3) ──────────────────────────────────────────────

class NumericalError(HazardError):
    exit_code = EXIT_NUMERICAL


class NonFiniteError(NumericalError):
    def __init__(self, message: str, point=None):
        super().__init__(message)
        self.point = point


class LineSearchError(NumericalError):
    pass


class NotPositiveDefiniteError(NumericalError):
    pass


class DegenerateBasisError(NumericalError):
    pass


class SingularSystemError(NumericalError):
    pass


class UnidentifiableArmError(NumericalError):
    def __init__(self, message: str, arm: int | None = None):
        super().__init__(message)
        self.arm = arm


class EMAscentError(NumericalError):
    """Marginal objective increased during EM, which EM never does."""


class GridSearchError(NumericalError):
    pass
