"""Exception taxonomy shared by all sglab modules."""


class SglabError(Exception):
    """Base class for all package errors."""


class InvalidPoint(SglabError):
    """Point has non-finite coordinates."""


class DimensionError(SglabError):
    """Operands live in different dimensions."""


class InvalidArgument(SglabError):
    """Argument outside the documented domain."""


class MeanNotZero(SglabError):
    """A zero-mean field was required."""


class InvalidDensity(SglabError):
    """Density violates positivity or normalization preconditions."""


class NoConvergence(SglabError):
    """Iterative solver stagnated before reaching tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConvexityLost(SglabError):
    """Discrete convexity of a potential was lost during iteration."""


class NotBalanced(SglabError):
    """Transport endpoints carry different total mass or particle count."""


class DegenerateCloud(SglabError):
    """Particles coincide below the resolvable separation."""


class ResolutionError(SglabError):
    """Requested quantity is unresolvable at the current discretization."""


class TimestepTooLarge(SglabError):
    """Advective CFL condition violated."""


class StateInvalid(SglabError):
    """Evolution state violates a structural invariant."""


class InvalidTrajectory(SglabError):
    """Stored trajectory lacks data required by the analysis."""


class UsageError(SglabError):
    """Malformed configuration or command line."""
