"""Error taxonomy shared across the package."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or inconsistent."""


class ProtocolViolation(RuntimeError):
    """Traffic observed on the wire violates the aggregation protocol."""


class DeadlockError(RuntimeError):
    """The event loop hit its cap with unfinished hosts still waiting."""
