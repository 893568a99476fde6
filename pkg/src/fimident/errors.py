"""Exception types raised across the package."""


class FimIdentError(Exception):
    """Base class for all package errors."""


class ConfigError(FimIdentError, ValueError):
    """Invalid model, scenario or study configuration."""


class NonConvergence(FimIdentError):
    """Power-flow iteration did not converge."""


class SingularNetwork(FimIdentError):
    """Network admittance matrix cannot be factorized."""


class NumericalInstability(FimIdentError):
    """A simulated state became non-finite."""


class ZeroMean(FimIdentError, ValueError):
    """SNR-based noise sizing is undefined for a zero-mean signal."""


class GridMismatch(FimIdentError, ValueError):
    """Two traces are not sampled on the same time grid."""


class ZeroPerturbation(FimIdentError, ValueError):
    """Finite-difference perturbation alpha_k * p_k is zero."""


class NoFeasibleAlpha(FimIdentError):
    """No perturbation on the search grid lifts sigma_d above C * sigma_n."""

    def __init__(self, path, sigma_d_max, threshold):
        self.path = path
        self.sigma_d_max = sigma_d_max
        self.threshold = threshold
        super().__init__(
            f"{path}: max sigma_d {sigma_d_max:.4g} never exceeds {threshold:.4g}"
        )


class BoundsViolation(FimIdentError, ValueError):
    """Parameter vector lies outside its box constraints."""


class AllChannelsInfeasible(FimIdentError):
    """Every candidate channel yields an infinite ellipsoid volume."""


class StudyFailure(FimIdentError):
    """Too many Monte-Carlo trials failed; the partial report is attached."""

    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)
