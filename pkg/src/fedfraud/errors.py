"""Shared exception types."""


class ConfigError(Exception):
    """A configuration value is invalid or infeasible."""


class MissingArtifactError(Exception):
    """An upstream pipeline artifact does not exist yet."""

    def __init__(self, path, producer):
        super().__init__(f"missing artifact {path}; produce it with `fedfraud {producer}`")
        self.path = path
        self.producer = producer


class RoutingError(Exception):
    """A transaction references an account unknown to the bank registry."""


class ProtocolError(Exception):
    """A federation message violated the protocol contract."""


class AuditViolation(Exception):
    """The message trace contains a disallowed cross-party record."""
