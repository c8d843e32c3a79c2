"""Exception types shared across the package."""


class FedscapeError(Exception):
    """Base class for all fedscape errors."""


class ConfigError(FedscapeError, ValueError):
    """Invalid configuration, shapes, or arguments."""


class NumericError(FedscapeError, RuntimeError):
    """Non-finite values or undefined statistics encountered at runtime."""


class IngestionError(FedscapeError):
    """A dataset file could not be parsed or validated."""


class ReplayError(FedscapeError):
    """A round log is missing, truncated, or fails its checksum."""
