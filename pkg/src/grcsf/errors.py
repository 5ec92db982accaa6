"""Exception types shared across the package."""


class GrcsfError(Exception):
    """Base class for package errors."""


class ConfigurationError(GrcsfError, ValueError):
    """A configuration value is out of range or inconsistent."""


class ValidationError(GrcsfError, ValueError):
    """Input data has the wrong shape, range or identity."""
