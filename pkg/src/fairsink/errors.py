"""Exception hierarchy.

The CLI maps each family onto an exit code: configuration errors exit 1,
data/schema/metric errors exit 2 and numerical errors exit 3.
"""


class FairsinkError(Exception):
    exit_code = 1


class ConfigurationError(FairsinkError, ValueError):
    exit_code = 1


class DataError(FairsinkError, ValueError):
    exit_code = 2


class SchemaError(DataError):
    pass


class MetricError(DataError):
    pass


class NumericalError(FairsinkError, ArithmeticError):
    exit_code = 3
