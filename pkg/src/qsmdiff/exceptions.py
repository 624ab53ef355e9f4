"""Exception hierarchy shared across the toolkit.

CLI exit codes are derived from the class: parameter/usage errors exit 2,
data errors exit 3, numeric errors exit 4.
"""


class QSMError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ParameterError(QSMError, ValueError):
    exit_code = 2


class ContractError(ParameterError):
    """An operation precondition on values was violated."""


class CapabilityError(ParameterError):
    """The requested mode is not supported by the supplied component."""


class ScheduleError(ParameterError):
    pass


class DataError(QSMError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """Bad magic, version, or structure in a binary file."""


class LengthError(FormatError):
    """File is truncated or has trailing bytes."""


class DatasetError(DataError):
    pass


class MetricError(DataError):
    pass


class NumericError(QSMError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
