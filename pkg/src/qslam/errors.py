"""Exception hierarchy shared by all stages.

The CLI maps these onto exit codes: DataError -> 2, NumericalError -> 3.
"""


class QSlamError(Exception):
    pass


class InvalidInputError(QSlamError, ValueError):
    pass


class BehindCameraError(InvalidInputError):
    pass


class UnderdeterminedError(InvalidInputError):
    pass


class ContractViolation(QSlamError, RuntimeError):
    """Raised when an API is called with shapes or ordering it does not support."""


class DataError(QSlamError):
    """Malformed or inconsistent dataset / config files."""


class NumericalError(QSlamError, ArithmeticError):
    pass


class FitFailedError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class MetricUndefinedError(NumericalError):
    pass
