# errors.py
"""
Exception hierarchy for the lab. Kept at the top level so utils and services
can both import it without circular imports. The CLI maps each family to an
exit status.
"""


class LabError(Exception):
    """Base class for every error the toolkit raises on purpose."""

    exit_code = 1


class ConfigError(LabError):
    """Malformed or unknown configuration; nothing is computed."""

    exit_code = 2


class PreconditionError(LabError, ValueError):
    """An operation was called outside its contract."""

    exit_code = 2


class NumericalError(LabError):
    exit_code = 3


class BlowUpError(NumericalError):
    def __init__(self, index: int, message: str = ""):
        self.index = index
        super().__init__(message or f"non-finite state at step {index}")


class QuadratureError(NumericalError):
    pass


class NotHurwitzError(NumericalError):
    pass


class WeightDegeneracyError(NumericalError):
    pass


class OverflowEstimateError(NumericalError):
    pass


class AuditFailure(LabError):
    """A verified inequality failed on the computed data."""

    exit_code = 4
