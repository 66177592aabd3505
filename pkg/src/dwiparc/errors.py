"""Exception hierarchy shared by every module."""


class DwiparcError(Exception):
    """Base class for all package errors."""


class NiftiFormatError(DwiparcError):
    """Malformed or unreadable NIfTI-1 header."""


class UnsupportedDatatypeError(NiftiFormatError):
    pass


class TruncatedFileError(NiftiFormatError):
    """Payload shorter than the header promises."""


class VolumeError(DwiparcError, ValueError):
    """A Volume3D / DwiSeries invariant does not hold."""


class TransformError(DwiparcError):
    pass


class GradientSchemeError(DwiparcError):
    """Gradient table cannot support a tensor fit."""


class UndefinedCorrelationError(DwiparcError, ValueError):
    pass


class SchemaValidationError(DwiparcError, ValueError):
    pass


class LabelDataError(DwiparcError, ValueError):
    """Label values outside the declared label space, or inconsistent stage outputs."""


class ConfigurationError(DwiparcError):
    pass


class BackendContractError(DwiparcError):
    """Backend declared shape/channel counts do not match the request."""


class BackendError(DwiparcError):
    """Backend failed at runtime or returned unusable scores."""


class EmptySummaryError(DwiparcError, ValueError):
    pass


class StageError(DwiparcError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
