"""Exception types raised across the package."""


class SpiError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(SpiError, ValueError):
    pass


class SingularGeometryError(SpiError):
    """A range anchor (nearly) coincides with the evaluated state."""

    def __init__(self, message, anchor_index=None):
        super().__init__(message)
        self.anchor_index = anchor_index


class NumericalSingularityError(SpiError):
    pass


class UnderConstrainedError(SpiError):
    pass


class ConfigError(SpiError):
    """Configuration validation failure; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
