"""Exception types raised across the package."""


class MOSError(Exception):
    """Base class for all package errors."""


class DataError(MOSError):
    """Malformed or inconsistent input data."""


class TruncatedRecord(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class ParseError(DataError):
    pass


class NonOrthonormalRotation(DataError):
    pass


class NonRigidPose(DataError):
    pass


class LengthMismatch(DataError, ValueError):
    pass


class CountMismatch(DataError, ValueError):
    pass


class MissingVoxel(DataError, KeyError):
    pass


class CoordinateOutOfRange(DataError, ValueError):
    pass


class EmptyPatternList(MOSError, ValueError):
    pass


class UnknownSuite(MOSError, KeyError):
    pass


class ShapeMismatch(MOSError, ValueError):
    pass


class NumericError(MOSError):
    """Non-finite values or invalid numeric parameters."""


class NonPositiveDelta(NumericError, ValueError):
    pass


class RowNotNormalized(NumericError, ValueError):
    pass


class DisconnectedLoss(NumericError, RuntimeError):
    pass


class CheckpointMismatch(MOSError):
    pass
