class CodesignException(Exception):
    """Base exception for reachability and co-design errors"""
    pass


class DimensionMismatchException(CodesignException):
    """Raised when matrix or vector dimensions are inconsistent"""
    pass


class NotPositiveSemidefiniteException(CodesignException):
    """Raised when a shape or covariance matrix is indefinite beyond tolerance"""
    pass


class InvalidDirectionException(CodesignException):
    """Raised when a support direction is not a unit vector"""
    pass


class InvalidWeightException(CodesignException):
    """Raised when outer-bound pair weights are missing or nonpositive"""
    pass


class UnstableSystemException(CodesignException):
    """Raised when a matrix that must be Schur stable is not"""

    def __init__(self, message, spectral_radius=None):
        super().__init__(message)
        self.spectral_radius = spectral_radius


class UnboundedQuantileException(CodesignException):
    """Raised when a chi-squared quantile is requested at probability one"""
    pass


class HorizonNotSettledException(CodesignException):
    """Raised when the reachable-set bound does not settle before the horizon cap"""

    def __init__(self, message, closed_loop_radius=None, open_loop_radius=None):
        super().__init__(message)
        self.closed_loop_radius = closed_loop_radius
        self.open_loop_radius = open_loop_radius


class ConvergenceException(CodesignException):
    """Raised when no multi-start instance converges"""

    def __init__(self, message, best_residual=None):
        super().__init__(message)
        self.best_residual = best_residual


class InfeasibleTargetException(CodesignException):
    """Raised when a performance target lies outside the trade-off interval"""

    def __init__(self, message, gamma_star=None, gamma_open_loop=None):
        super().__init__(message)
        self.gamma_star = gamma_star
        self.gamma_open_loop = gamma_open_loop


class InvalidConfigException(CodesignException):
    """Raised when a run configuration cannot be parsed or validated"""
    pass


class UnknownCommandException(CodesignException):
    """Raised when the dispatcher receives a command it does not know"""
    pass
