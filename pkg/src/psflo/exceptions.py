"""Exception types raised across the package."""


class PSFLOError(Exception):
    """Base class for all errors raised by psflo."""


class DegeneratePlane(PSFLOError, ValueError):
    """Plane passes (numerically) through the origin; the CP form is undefined."""


class DegenerateLine(PSFLOError, ValueError):
    """Line passes (numerically) through the origin; the CP form is undefined."""


class MalformedFile(PSFLOError, ValueError):
    pass


class LengthMismatch(PSFLOError, ValueError):
    pass


class TooFewPoints(PSFLOError, ValueError):
    pass


class NoModel(PSFLOError, RuntimeError):
    """RANSAC found no model with a sufficient inlier ratio."""


class EmptySet(PSFLOError, ValueError):
    pass


class EmptyAfterSampling(PSFLOError, ValueError):
    pass


class Diverged(PSFLOError, RuntimeError):
    pass


class Degenerate(PSFLOError, RuntimeError):
    """Normal equations are too ill-conditioned to trust the solution."""


class TooShort(PSFLOError, ValueError):
    pass


class IoError(PSFLOError, OSError):
    """An output file could not be written."""


class ConfigError(PSFLOError, ValueError):
    """Unknown or ill-typed configuration key."""
