"""Exception types raised across latentlens."""


class LatentLensError(Exception):
    """Base class for every error raised by this package."""


class FormatError(LatentLensError, ValueError):
    pass


class BadMagic(FormatError):
    pass


class BadHeader(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class LabelOutOfRange(FormatError):
    pass


class DimensionMismatch(LatentLensError, ValueError):
    pass


class SizeMismatch(LatentLensError, ValueError):
    pass


class BatchTooSmall(LatentLensError, ValueError):
    pass


class ImageTooLarge(LatentLensError, ValueError):
    pass


class ZeroVector(LatentLensError, ValueError):
    pass


class EmptyTextAfterTokenization(LatentLensError, ValueError):
    pass


# Alias used by the metric code, where the same condition has a shorter name.
EmptyAfterTokenization = EmptyTextAfterTokenization


class LengthMismatch(LatentLensError, ValueError):
    pass


class NoOverlap(LatentLensError, ValueError):
    pass


class DegenerateLabels(LatentLensError, ValueError):
    pass


class IncompleteRun(LatentLensError):
    pass


class BackendError(LatentLensError):
    """Failure talking to a remote explainer or embedding service."""


class AuthMissing(BackendError):
    pass


class HttpError(BackendError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body


class MalformedResponse(BackendError):
    pass


class Timeout(BackendError):
    pass
