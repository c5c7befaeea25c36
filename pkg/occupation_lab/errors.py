# occupation_lab/errors.py
"""Exception hierarchy shared by every lab module.

Domain code raises these; the HTTP layer and the CLI translate them into
status codes and exit codes.
"""

from typing import Any, Optional


class LabError(Exception):
    """Base class for all lab failures."""


class ConfigurationError(LabError):
    """Experiment configuration is malformed or refers to something missing."""


class LatticeError(LabError, ValueError):
    """Invalid lattice geometry (dimension, radius, shape, coordinate range)."""


class StopRuleError(LabError, ValueError):
    """A walk stop rule that can never fire or is self-contradictory."""


class ConductanceError(LabError, ValueError):
    """Conductances or speed measure violate positivity, symmetry or bounds."""


class TruncationError(LabError):
    """A trajectory hit the configured step cap before its stop rule fired."""

    def __init__(self, message: str, partial: Optional[Any] = None):
        super().__init__(message)
        self.partial = partial


class AccuracyError(LabError):
    """Requested accuracy needs a truncation radius beyond the memory cap."""

    def __init__(self, message: str, required_radius: Optional[int] = None):
        super().__init__(message)
        self.required_radius = required_radius


class ConvergenceError(LabError):
    """An iterative solver stopped without meeting its tolerance."""

    def __init__(self, message: str, residual: Optional[float] = None):
        super().__init__(message)
        self.residual = residual


class InfeasibleLevelError(LabError, ValueError):
    """Constraint level outside (0, theta_inf)."""


class ThetaModelError(LabError, ValueError):
    """Theta model is not monotone, not zero at the origin, or malformed."""


class RegistrationError(LabError):
    """A local functional failed its regularity contract."""


class ScaffoldError(LabError, ValueError):
    """Mesoscopic box scaffold violates nesting or exponent constraints."""


class TiltError(LabError, ValueError):
    """Tilt function is not admissible (vanishing interior values, bad radius)."""


class InsufficientReplicasError(LabError, ValueError):
    """Too few Monte-Carlo replicas to report an estimate."""


class TrialFunctionError(LabError, ValueError):
    """A variational trial function does not equal 1 on the target set."""
