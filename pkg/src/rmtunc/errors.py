"""Exception hierarchy shared by every module.

The CLI maps any :class:`RmtError` to exit status 3 and prints the class name.
"""


class RmtError(Exception):
    """Base class for numerical failures raised by this package."""


class DomainError(RmtError, ValueError):
    pass


class ShapeMismatch(RmtError, ValueError):
    pass


class SingularMatrix(RmtError):
    pass


class NotPositiveDefinite(RmtError):
    pass


class DofTooSmall(RmtError, ValueError):
    pass


class DispersionTooLarge(RmtError, ValueError):
    pass


class NormBoundViolated(RmtError, ValueError):
    pass


class SingularDraw(RmtError):
    """A sampled matrix stayed numerically singular after all resampling attempts."""


class Unsupported(RmtError, NotImplementedError):
    pass


class JointLimitError(RmtError, ValueError):
    pass


class NearSingularTrajectory(RmtError):
    pass


class InsufficientRuns(RmtError, ValueError):
    pass


class InsufficientSamples(RmtError, ValueError):
    pass


class WeightCollapse(RmtError):
    """Every particle likelihood hit the floor at the same step."""


class ConfigError(Exception):
    """Invalid experiment configuration (CLI exit status 2)."""
