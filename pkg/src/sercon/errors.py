"""Exception types shared across the package."""


class SerconError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SerconError):
    """Invalid configuration file, key, or value."""


class DataError(SerconError):
    """Malformed or inconsistent data: manifests, embedding files,
    checkpoints, datastores, WAV files, or corpora that violate their
    invariants."""


class NumericsError(SerconError):
    """Non-finite values showed up where finite numbers are required."""
