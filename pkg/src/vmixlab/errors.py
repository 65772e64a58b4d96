"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ValueError):
    """A binary artifact is malformed or has the wrong magic/version."""


class StaleCacheError(FormatError):
    """A cached artifact no longer matches the configuration it was built from."""
