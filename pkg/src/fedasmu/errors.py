"""Exception types shared across the package."""


class FedasmuError(Exception):
    """Base class for all package errors."""


class UsageError(FedasmuError, ValueError):
    """Caller passed arguments that violate an operation's contract."""


class ProtocolError(FedasmuError, RuntimeError):
    """The federated protocol's own rules were violated at runtime."""


class ConfigError(FedasmuError, ValueError):
    """Experiment configuration failed to parse or validate."""
