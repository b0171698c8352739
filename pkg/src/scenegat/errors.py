class ScenegatError(Exception):
    """Base class for errors raised by this package."""

    exit_code = 1


class DataError(ScenegatError, ValueError):
    """Malformed, inconsistent or out-of-domain input data."""

    exit_code = 2


class CheckpointError(DataError):
    pass


class NumericError(ScenegatError, ArithmeticError):
    """A NaN or infinity surfaced in a numeric kernel."""

    exit_code = 3
