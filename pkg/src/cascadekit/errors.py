"""Exception hierarchy shared across the package."""


class CascadeKitError(Exception):
    """Base class for all cascadekit errors."""


class ValidationError(CascadeKitError):
    """Invalid input data, configuration, or arguments.

    Messages carry enough context (file, line, item id, offending index) to
    act on without a debugger.
    """


class RefinerError(CascadeKitError):
    """A refiner backend failed to produce a usable response."""


class MissingRecordingError(RefinerError):
    """Replay file has no entry for the requested item."""


class DigestMismatchError(RefinerError):
    """Replay entry exists for the item but was recorded under a different
    prompt digest (the prompt changed since recording)."""


class RemoteTimeoutError(RefinerError):
    """Remote endpoint did not answer within the configured timeout."""


class RemoteHTTPError(RefinerError):
    """Remote endpoint answered with a non-2xx status."""

    def __init__(self, status: int, message: str = ""):
        self.status = status
        super().__init__(message or f"HTTP {status}")


class RemoteProtocolError(RefinerError):
    """Remote endpoint answered 2xx but the body does not follow the
    chat-completion schema."""
