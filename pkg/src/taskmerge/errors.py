"""Exception hierarchy shared across the package."""


class MergeError(Exception):
    """Base class for every error raised by taskmerge."""


class ShapeError(MergeError, ValueError):
    pass


class NonFiniteError(MergeError, ValueError):
    pass


class ConfigError(MergeError, ValueError):
    """Invalid hyperparameter, policy or configuration value."""


class CheckpointFormatError(MergeError, ValueError):
    """A checkpoint file does not conform to the container layout.

    ``position`` is the byte offset (from the start of the file) where the
    problem was detected, or ``None`` when it is not tied to one place.
    """

    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"{message} (at byte {position})"
        super().__init__(message)


class TruncatedFileError(CheckpointFormatError):
    pass


class HeaderError(CheckpointFormatError):
    pass


class UnknownDtypeError(CheckpointFormatError):
    pass


class OffsetError(CheckpointFormatError):
    pass


class IncompatibleCheckpointsError(MergeError, ValueError):
    pass


class DegenerateLayerError(MergeError):
    """Every task vector of a layer is zero; the merged vector is zero."""


class OptimizationError(MergeError, RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NonFiniteGradientError(OptimizationError):
    pass


class DivergenceError(OptimizationError):
    pass


class UnsoundRadiusError(MergeError, ValueError):
    """The Lipschitz estimation ball does not contain every evaluation point."""
