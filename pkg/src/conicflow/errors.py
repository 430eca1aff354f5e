"""Exception and warning types raised by conicflow."""


class ConicFlowError(Exception):
    """Base class for all conicflow errors."""


class StructureError(ConicFlowError):
    """The face complex is not a closed oriented 2-manifold."""


class GeometryError(ConicFlowError):
    """Edge lengths violate a triangle inequality or a divisor is invalid."""

    def __init__(self, message, face=None):
        super().__init__(message)
        self.face = face


class MeshQualityError(GeometryError):
    """A rescaled metric would produce a degenerate triangle."""


class NumericalError(ConicFlowError):
    """An iterative procedure failed to reach its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DegeneracyError(NumericalError):
    """A normalising quantity is numerically zero (e.g. K is ~0)."""


class RangeError(NumericalError):
    """exp(2u) overflows double precision."""


class SeedError(NumericalError):
    """No point on the constraint set could be bracketed along the seed family."""


class ProjectionError(NumericalError):
    """Renormalisation onto the constraint set failed."""


class StiffnessError(NumericalError):
    """The adaptive step size fell below dt_min."""

    def __init__(self, message, residual=None, diagnostics=None):
        super().__init__(message, residual)
        self.diagnostics = diagnostics or {}


class SignError(ConicFlowError):
    """A constant that must be positive is not (contradicts the data)."""


class UniformizationError(NumericalError):
    """Newton iteration for a constant curvature background diverged."""

    def __init__(self, message, residual=None, history=None):
        super().__init__(message, residual)
        self.history = list(history or [])


class ConfigError(ConicFlowError):
    """Invalid run configuration or generator parameters."""


class ConditioningWarning(UserWarning):
    """A cotangent weight is large enough to hurt conditioning."""
