"""Exception hierarchy.

The CLI maps each family to an exit code: configuration problems exit 1,
data problems exit 2, numerical failures exit 3.
"""


class MapleError(Exception):
    exit_code = 1


class ConfigError(MapleError, ValueError):
    exit_code = 1


class DataError(MapleError, ValueError):
    exit_code = 2


class NumericalError(MapleError, ArithmeticError):
    exit_code = 3


class SingularCovarianceError(NumericalError):
    pass


class DegenerateVarianceError(NumericalError):
    pass


class NonFiniteLossError(NumericalError):
    pass
