"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class LatentCtrlError(Exception):
    exit_code = 1


class UsageError(LatentCtrlError):
    exit_code = 2


class DataError(LatentCtrlError):
    """Bad or missing input data (files, labels, attribute ids)."""

    exit_code = 3


class DimensionError(DataError, ValueError):
    pass


class EmptyInputError(DataError, ValueError):
    pass


class FormatError(DataError):
    """Corrupt or inconsistent binary blob. ``offset`` is the byte position."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CoverageError(DataError):
    pass


class LookupFailure(DataError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class MissingDataError(DataError):
    pass


class DegenerateNormalizerError(DataError):
    pass


class NumericError(LatentCtrlError):
    exit_code = 4


class DivergenceError(NumericError):
    def __init__(self, epoch, loss):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch


class VanishingGradientError(NumericError):
    pass
