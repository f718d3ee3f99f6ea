"""Exception hierarchy shared by every module of the package."""


class AmsaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AmsaError, ValueError):
    def __init__(self, message, level=None, expected=None, actual=None):
        self.level = level
        self.expected = expected
        self.actual = actual
        if level is not None:
            message = f"{message} (level {level}: expected {expected}, got {actual})"
        super().__init__(message)


class StateRangeError(AmsaError, IndexError):
    pass


class NonFiniteError(AmsaError, FloatingPointError):
    pass


class DistributionError(AmsaError, ValueError):
    pass


class KernelError(AmsaError, ValueError):
    pass


class ErgodicityError(AmsaError):
    def __init__(self, message, residual=None):
        self.residual = residual
        super().__init__(message)


class MixingTimeError(AmsaError):
    def __init__(self, message, last_tv=None):
        self.last_tv = last_tv
        super().__init__(message)


class NonGeometricError(AmsaError):
    pass


class ScheduleError(AmsaError, ValueError):
    pass


class DivergenceError(AmsaError, FloatingPointError):
    def __init__(self, message, t=None, level=None):
        self.t = t
        self.level = level
        super().__init__(f"{message} (t={t}, level={level})")


class NonConvergenceError(AmsaError):
    def __init__(self, message, residuals=None):
        self.residuals = residuals
        super().__init__(message)


class DegeneracyError(AmsaError, ArithmeticError):
    pass


class UnsupportedError(AmsaError, NotImplementedError):
    pass


class GenerationError(AmsaError):
    pass


class AggregationError(AmsaError, ValueError):
    pass


class FitError(AmsaError, ValueError):
    pass


class ConfigError(AmsaError, ValueError):
    pass
