"""Exception hierarchy shared by the estimators and the simulation engine."""


class PopAdjustError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PopAdjustError, ValueError):
    """Invalid user-supplied configuration (bad covariance, odd n, ...)."""


class DomainError(PopAdjustError, ValueError):
    """Argument outside the mathematical domain of a function."""


class CalibrationError(PopAdjustError):
    """Censoring-rate calibration could not bracket the target."""


class EstimationError(PopAdjustError):
    """A model could not be fitted to the data."""


class NoEventsError(EstimationError):
    pass


class RankDeficiencyError(EstimationError):
    pass


class SeparationError(EstimationError):
    """Monotone partial likelihood; the maximizer is not finite.

    Attributes
    ----------
    beta : ndarray or None
        Coefficients at the iteration where divergence was detected.
    n_iter : int
        Newton iterations performed.
    """

    def __init__(self, message, beta=None, n_iter=0):
        super().__init__(message)
        self.beta = beta
        self.n_iter = n_iter


class WeightEstimationError(EstimationError):
    """Method-of-moments weights have no finite solution."""


class SummarizationError(PopAdjustError):
    pass
