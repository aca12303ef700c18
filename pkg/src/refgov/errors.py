"""Exception types shared across the library."""


class RefgovError(Exception):
    """Base class for library errors."""


class DimensionError(RefgovError, ValueError):
    """Matrix or vector dimensions are inconsistent."""


class StabilityError(RefgovError, ValueError):
    """A matrix required to be Schur has spectral radius >= 1 - tol."""


class GeometryError(RefgovError, ValueError):
    """A set operation received an unbounded/empty/degenerate set."""


class InfeasibleError(RefgovError, RuntimeError):
    """A constraint-admissible set or a governed run became infeasible."""


class ScenarioError(RefgovError, ValueError):
    """A scenario file failed schema or consistency validation."""


class VerificationError(RefgovError, RuntimeError):
    """A construction-time verification (set inclusion, audit) failed."""
