class SnadapterError(ValueError):
    """
    Base class for all errors raised by the engine
    """


class ValidationError(SnadapterError):
    """
    Inputs violate a documented precondition (non-finite feature, bad label,
    encoding dimension mismatch, missing column...)
    """


class DimensionMismatchError(ValidationError):
    """
    Vector, matrix or payload dimensions do not agree
    """


class FormatError(SnadapterError):
    """
    A feature or store file can't be parsed
    """


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class PayloadDimensionError(FormatError, DimensionMismatchError):
    """
    The payload size or sidecar vocabularies disagree with the header dimensions
    """
