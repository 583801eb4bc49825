"""Exception hierarchy shared by all stereorecon modules."""


class StereoReconError(Exception):
    """Base class for all errors raised by this package."""


class InvalidParameter(StereoReconError):
    """A parameter is outside its documented range."""


class DimensionMismatch(StereoReconError):
    """Two inputs that must agree in shape do not."""


class AngleNearPi(StereoReconError):
    """Rotation angle too close to pi for a well-conditioned log map."""


class TooFewPoints(StereoReconError):
    """An operation needs more points than the cloud provides."""


class InsufficientOverlap(StereoReconError):
    """Not enough jointly valid pixels to fit an alignment."""


class DegenerateInput(StereoReconError):
    """Input carries no usable variation (e.g. a constant depth map)."""


class TooFewCorrespondences(StereoReconError):
    """Correspondence search returned fewer pairs than the required minimum."""


class DegenerateNormalSystem(StereoReconError):
    """The 6x6 normal-equation system is rank deficient beyond damping."""


class DegenerateGeometry(StereoReconError):
    """Matched geometry does not constrain a rigid transform (e.g. collinear)."""


class RegistrationFailed(StereoReconError):
    """A required pairwise registration could not be established."""


class SingularSystem(StereoReconError):
    """The reduced pose-graph Hessian is rank deficient."""


class UnsupportedFormat(StereoReconError):
    """File format variant the reader does not support."""


class IoFailure(StereoReconError):
    """Underlying file operation failed."""


class ParseError(StereoReconError):
    """Malformed file content.

    Carries the location of the offending content: a 1-based line number
    for text formats, or a byte offset for binary payloads.
    """

    def __init__(self, message: str, *, line: int | None = None, offset: int | None = None):
        location = ""
        if line is not None:
            location = f" (line {line})"
        elif offset is not None:
            location = f" (byte offset {offset})"
        super().__init__(message + location)
        self.line = line
        self.offset = offset
