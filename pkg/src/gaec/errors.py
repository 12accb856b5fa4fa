"""Exception hierarchy shared by every gaec module."""


class GaecError(Exception):
    """Base class for all errors raised by gaec."""


class ConfigError(GaecError, ValueError):
    """Invalid or unsatisfiable configuration, rejected before any work."""


class IntegrityError(GaecError):
    """Archive or bitstream failed a structural or checksum check."""


class DecodeError(IntegrityError):
    """A bitstream could not be decoded (truncated, malformed, trailing bits)."""


class ExternalReferenceError(GaecError):
    """An EXTERNAL predictor reference is missing or does not match its checksum."""


class NoEventsError(GaecError, ValueError):
    """A detection metric is undefined because the ground truth holds no events."""


class BoundUnattainableError(GaecError):
    """A patch cannot meet its bound and the raw fallback is disabled."""
