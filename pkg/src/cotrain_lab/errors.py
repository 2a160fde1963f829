"""Semantic exception hierarchy shared by all modules."""


class CotrainError(Exception):
    """Base class for every error raised by this package."""


class DomainError(CotrainError, ValueError):
    """An argument is outside its mathematical domain (e.g. t out of range)."""


class ShapeError(CotrainError, ValueError):
    """Array dimensions are incompatible."""


class ConfigError(CotrainError, ValueError):
    """A configuration object violates its invariants."""


class NumericError(CotrainError, ValueError):
    """Non-finite values where finite ones are required."""


class UndefinedRatioError(CotrainError, ZeroDivisionError):
    """Both weights of a relative-weight ratio are zero."""


class UndefinedCorrelationError(CotrainError, ValueError):
    """Correlation requested on a zero-variance input."""


class IncompleteDesignError(CotrainError, ValueError):
    """Factorial table has missing cells or unbalanced replicates."""


class StaleCacheError(CotrainError, RuntimeError):
    """A backward pass was given a cache from an outdated forward pass."""


class DivergenceError(CotrainError, RuntimeError):
    """Training loss became non-finite or exceeded the abort threshold."""

    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (loss={loss})")


class SamplerAbort(CotrainError, RuntimeError):
    """The score function returned non-finite values during sampling."""

    def __init__(self, t: float, step: int):
        self.t = t
        self.step = step
        super().__init__(f"non-finite score at t={t} (step {step})")
