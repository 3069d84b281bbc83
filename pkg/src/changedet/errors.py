"""Shared exception types."""


class ShapeError(ValueError):
    """An input array has an incompatible shape or size."""


class ConfigurationError(ValueError):
    """A config value or combination of values is invalid."""
