"""Exception types raised across the package."""


class OrthoBOError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(OrthoBOError):
    pass


class NumericalFailure(OrthoBOError):
    pass


class DimensionUnsupported(OrthoBOError):
    pass


class DimensionMismatch(OrthoBOError, ValueError):
    pass


class InsufficientSamples(OrthoBOError):
    pass


class InsufficientData(OrthoBOError):
    pass


class InsufficientRepeats(OrthoBOError):
    pass


class LengthMismatch(OrthoBOError, ValueError):
    pass


class NonpositiveGap(OrthoBOError, ValueError):
    pass


class SurrogateFailure(OrthoBOError):
    pass


class MissingRuns(OrthoBOError):
    pass
