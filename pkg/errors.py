"""Exception hierarchy shared by the registration modules and the CLI."""


class RoTIRError(Exception):
    """Base class for all registration errors."""


class ConfigurationError(RoTIRError, ValueError):
    """Invalid configuration, shapes or arguments (CLI exit code 2)."""


class NumericalFailure(RoTIRError):
    """NaN/Inf encountered in a numerical routine (CLI exit code 3)."""


class NoSolutionError(RoTIRError):
    """An estimator was given no correspondences."""


class DegenerateEstimateError(RoTIRError):
    """Correspondences do not determine a unique transform."""


class EmptyForegroundError(RoTIRError):
    """No foreground could be isolated from a raw image."""


class PoseSamplingError(RoTIRError):
    """A sprite pose that keeps the sprite inside the frame could not be found."""
