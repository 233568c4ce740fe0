"""Exception hierarchy shared by every assimila module."""


class AssimilaError(Exception):
    """Base class for all errors raised by assimila."""


class DimensionMismatch(AssimilaError, ValueError):
    pass


class NotPositiveDefinite(AssimilaError, ValueError):
    """A matrix expected to be SPD had a non-positive pivot or eigenvalue."""


class SingularCovariance(AssimilaError, ValueError):
    """Inverse action requested from a covariance that has no inverse."""


class SingularInnovationCovariance(AssimilaError, ValueError):
    pass


class SingularEnsembleGram(AssimilaError, ValueError):
    pass


class InvalidSpectrum(AssimilaError, ValueError):
    pass


class RankExhausted(AssimilaError, ValueError):
    pass


class NonFiniteState(AssimilaError, FloatingPointError):
    """Model integration produced inf/NaN.

    ``index`` is the time index of the offending state when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConvergenceFailure(AssimilaError, RuntimeError):
    pass


class BreakdownError(AssimilaError, ArithmeticError):
    """Krylov breakdown, e.g. non-positive curvature inside CG."""


class MaxIterations(AssimilaError, RuntimeError):
    """Iteration cap reached. ``result`` holds the best iterate."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class LineSearchFailure(AssimilaError, RuntimeError):
    pass


class OuterDivergence(AssimilaError, RuntimeError):
    pass


class ConfigError(AssimilaError, ValueError):
    """Invalid experiment configuration. ``errors`` lists field-level messages."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
