"""Named exceptions. Each carries the CLI exit code it maps to."""


class PostError(Exception):
    exit_code = 1


class UsageError(PostError, ValueError):
    exit_code = 2


class DataError(PostError, ValueError):
    exit_code = 3


class RaggedRowsError(DataError):
    pass


class NonNumericCellError(DataError):
    pass


class LengthMismatchError(DataError):
    pass


class MissingLabelsError(DataError):
    pass


class LeakageError(DataError):
    """Normalization statistics did not come from a training split."""


class NoNormalSegmentError(DataError):
    pass


class UnreachableTargetError(DataError):
    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved or {}


class ProtocolError(DataError):
    """Requested evaluation protocol is not supported by the available labels."""


class CheckpointError(PostError):
    exit_code = 3


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class DimensionMismatchError(DataError):
    pass


class NumericalError(PostError, ArithmeticError):
    exit_code = 4


class DivergenceError(NumericalError):
    pass
