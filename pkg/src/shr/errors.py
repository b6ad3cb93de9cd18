"""Exception types raised across the registration pipeline."""


class SHRError(Exception):
    """Base class for all package errors."""


class TooFewCorrespondences(SHRError):
    pass


class DegenerateConfiguration(SHRError):
    pass


class EmptyLandmarkSet(SHRError):
    pass


class InvalidOcclusionFraction(SHRError):
    pass


class AllZeroMap(SHRError):
    pass


class InsufficientSamples(SHRError):
    pass


class DegenerateCovariance(SHRError):
    pass


class DimensionMismatch(SHRError):
    pass


class TooFewPoints(SHRError):
    pass


class DegenerateSource(SHRError):
    pass


class EmptyInput(SHRError):
    pass


class TooFewVisible(SHRError):
    pass


class EmptyDatabase(SHRError):
    pass


class NonFiniteActivation(SHRError):
    pass


class NonFiniteGradient(SHRError):
    pass


class CorruptFile(SHRError):
    pass


class ShapeMismatch(SHRError):
    pass


class RegistrationInfeasible(SHRError):
    pass


class NoTrajectories(SHRError):
    pass


class DivergenceDetected(SHRError):
    pass


class IoError(SHRError):
    pass
