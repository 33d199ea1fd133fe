"""Exception hierarchy shared by all subpackages.

The CLI maps these onto exit codes: ``ConfigError`` -> 2, ``DataError`` -> 3,
``NumericError`` -> 4.
"""


class PwlTscError(Exception):
    """Base class for package errors."""


class ConfigError(PwlTscError, ValueError):
    pass


class ValidationError(ConfigError):
    """A topology or config document failed validation.

    ``offenders`` lists the ids/fields at fault.
    """

    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


class DataError(PwlTscError, ValueError):
    pass


class RoutingError(DataError):
    pass


class ShapeError(PwlTscError, ValueError):
    pass


class StateError(PwlTscError, RuntimeError):
    pass


class ActionError(PwlTscError, ValueError):
    pass


class NumericError(PwlTscError, ArithmeticError):
    pass


class DegenerateDistributionError(NumericError):
    pass


class SingularityError(NumericError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class InvariantError(PwlTscError, RuntimeError):
    """Internal consistency check failed (e.g. vehicle conservation)."""
