"""Exception hierarchy shared by all modules."""


class HolonomyLabError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(HolonomyLabError, ValueError):
    """Malformed input: bad path, bad control vector, mismatched shapes."""


class DomainError(ValidationError):
    """A coordinate or control point lies outside the admissible domain."""


class NumericalError(HolonomyLabError):
    """A numerical routine could not deliver a trustworthy result."""


class ResolutionError(NumericalError):
    """The spatial grid is too coarse for the requested levels."""


class SolverError(NumericalError):
    """Eigen-iteration failed to converge; carries the residual reached."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DegeneracyError(NumericalError):
    """Two requested levels are closer than the degeneracy guard."""


class GaugeTrackingError(NumericalError):
    """Consecutive eigenfunctions overlap too weakly to fix a smooth gauge."""


class StepSizeError(NumericalError):
    """A per-step bound (generator norm, oscillation resolution) is violated."""


class DivergenceError(NumericalError):
    """The propagated state became non-finite."""


class EvanescentError(NumericalError):
    """Longitudinal kinetic energy is non-positive somewhere on the path."""
