"""Exception types raised across the pipeline."""


class FaceAttendError(Exception):
    """Base class for all package errors."""


class ImageFormatError(FaceAttendError, ValueError):
    pass


class BoundsError(FaceAttendError, ValueError):
    pass


class DimensionError(FaceAttendError, ValueError):
    pass


class GeometryError(FaceAttendError, ValueError):
    pass


class DegenerateDistributionError(FaceAttendError, ValueError):
    pass


class ConfigurationError(FaceAttendError, ValueError):
    pass


class TrainingError(FaceAttendError, RuntimeError):
    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class FrameSizeError(FaceAttendError, ValueError):
    pass


class EmptyInputError(FaceAttendError, ValueError):
    pass


class InsufficientDataError(FaceAttendError, ValueError):
    pass


class ConvergenceError(FaceAttendError, RuntimeError):
    def __init__(self, message, index, delta):
        super().__init__(message)
        self.index = index
        self.delta = delta


class RankError(FaceAttendError, ValueError):
    pass


class SymmetryError(FaceAttendError, ValueError):
    pass


class DegenerateClassesError(FaceAttendError, ValueError):
    pass


class NamingError(FaceAttendError, ValueError):
    pass


class RosterError(FaceAttendError, ValueError):
    pass


class EmptyGalleryError(FaceAttendError, ValueError):
    pass


class ModelStateError(FaceAttendError, RuntimeError):
    pass


class ValidationError(FaceAttendError, ValueError):
    pass
