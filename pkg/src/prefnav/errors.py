class ConfigurationError(ValueError):
    """Invalid shapes, parameters or inputs supplied to an operation."""


class UsageError(RuntimeError):
    """An API was called out of order (e.g. backward with a stale cache)."""
