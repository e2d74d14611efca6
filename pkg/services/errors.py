"""
Exception family for metastab services.
"""


# ---------------------------------------------------------------------------
# Base
# ---------------------------------------------------------------------------

class MetastabError(Exception):
    """Base class for every error raised by the metastab services."""


# ---------------------------------------------------------------------------
# Configuration and inputs
# ---------------------------------------------------------------------------

class ConfigurationError(MetastabError, ValueError):
    """Raised when a configuration or grid request cannot be honoured."""


class PreconditionError(MetastabError, ValueError):
    """Raised when an operation is called outside its stated preconditions."""


class ParameterError(MetastabError, ValueError):
    """Raised when derived construction parameters are out of range."""


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

class GeometryError(MetastabError):
    """Raised for invalid domains or points outside the supported region."""


class ProjectionError(GeometryError):
    """Raised when the Newton projection onto the boundary does not converge."""


class OffsetThresholdError(GeometryError):
    """Raised when a normal offset y + λν(y) lands inside the closed domain."""


# ---------------------------------------------------------------------------
# Model, flow and fields
# ---------------------------------------------------------------------------

class ModelError(MetastabError):
    """Raised when coefficients violate a structural requirement (e.g. SPD)."""


class StabilityError(MetastabError):
    """Raised when trajectories fail to settle or escape as required."""


class TopologyError(MetastabError):
    """Raised when the active lattice is disconnected from the source."""


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------

class ConstructionError(MetastabError):
    """Raised when a certificate construction cannot proceed."""


class InfeasibleMarginError(ConstructionError):
    """Raised when the exit level λ leaves no room above m₀."""


# ---------------------------------------------------------------------------
# Solvers and statistics
# ---------------------------------------------------------------------------

class AnisotropyError(MetastabError):
    """Raised when the nine-point stencil would lose monotonicity."""


class SolverError(MetastabError):
    """Raised when a linear solve misses its residual target."""


class SemilinearStepError(SolverError):
    """Raised when the semilinear fixed-point iteration does not settle."""


class StatisticsError(MetastabError):
    """Raised when Monte Carlo samples cannot support the requested statistic."""
