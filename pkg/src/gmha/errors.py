"""Exception types shared across the package."""


class GMHAError(Exception):
    pass


class DimensionError(GMHAError, ValueError):
    pass


class DegenerateRowError(GMHAError, ValueError):
    pass


class ConfigurationError(GMHAError, ValueError):
    pass


class UnsupportedCombinationError(ConfigurationError):
    pass


class OrderingError(GMHAError, ValueError):
    pass


class NumericError(GMHAError, FloatingPointError):
    pass


class EvaluationError(GMHAError, FloatingPointError):
    pass
