"""Shared exception types."""


class PhenoprogError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PhenoprogError):
    """Invalid configuration value or unknown key."""


class MissingArtifactError(PhenoprogError):
    """A pipeline stage input is absent on disk."""


class NumericError(PhenoprogError):
    """NaN/Inf encountered where finite values are required."""
