"""Exception taxonomy for the bridge service."""


class BridgeError(Exception):
    """Base class for every bridge-specific failure."""


class ConfigError(BridgeError):
    """Invalid service configuration."""


class DependencyError(BridgeError):
    """The real segmentation runtime is not available."""


class RequestError(BridgeError):
    """A request the service must reject; carries the HTTP status to use."""

    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


def bad_request(message: str) -> RequestError:
    """400: malformed JSON, base64, PNG, or field types."""
    return RequestError(400, message)


def empty_prompt(message: str) -> RequestError:
    """422: the request parses but carries no usable prompt."""
    return RequestError(422, message)
