"""Exception hierarchy shared across the pipeline."""


class DriveStyleError(Exception):
    """Base class for all package errors."""


class ValidationError(DriveStyleError):
    """Bad input data or configuration (CLI exit code 2)."""


class MissingColumn(ValidationError):
    pass


class NonMonotonicTimestamp(ValidationError):
    def __init__(self, row: int, message: str = ""):
        self.row = row
        super().__init__(message or f"timestamp not strictly increasing at row {row}")


class OutOfRangeValue(ValidationError):
    def __init__(self, row: int, message: str):
        self.row = row
        super().__init__(f"row {row}: {message}")


class EmptyFile(ValidationError):
    pass


class EmptyFleet(ValidationError):
    pass


class TooShort(ValidationError):
    pass


class InvalidWindowConfig(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class EmptyTrainingSet(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


class ClassTooSmall(ValidationError):
    pass


class TooFewSamplesPerClass(ValidationError):
    pass


class NonFiniteLoss(DriveStyleError):
    def __init__(self, message: str, iteration: int | None = None):
        self.iteration = iteration
        super().__init__(message)


class ModelFormatError(DriveStyleError):
    """Model file could not be read back."""


class FormatVersionMismatch(ModelFormatError):
    pass


class ChecksumMismatch(ModelFormatError):
    pass
