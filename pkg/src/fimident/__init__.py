"""Parameter identification of power-system controllers with a numerical Fisher
information matrix: simulate, measure, rank channels, fit, and validate."""

from .errors import (AllChannelsInfeasible, BoundsViolation, ConfigError, FimIdentError,
                     GridMismatch, NoFeasibleAlpha, NonConvergence, NumericalInstability,
                     SingularNetwork, StudyFailure, ZeroMean, ZeroPerturbation)
from .params import ParamEntry, ParameterVector

__version__ = "0.1.0"

__all__ = [
    "AllChannelsInfeasible", "BoundsViolation", "ConfigError", "FimIdentError", "GridMismatch",
    "NoFeasibleAlpha", "NonConvergence", "NumericalInstability", "ParamEntry",
    "ParameterVector", "SingularNetwork", "StudyFailure", "ZeroMean", "ZeroPerturbation",
]
