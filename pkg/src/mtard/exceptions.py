"""Exception types raised across the package."""


class MTARDError(Exception):
    """Base class for package errors."""


class InvalidInputError(MTARDError, ValueError):
    """Input contains non-finite values or has the wrong shape."""


class DomainError(MTARDError, ValueError):
    """A scalar argument lies outside its mathematical domain."""


class NumericError(MTARDError, ArithmeticError):
    """A computation produced a non-finite result."""


class StaleCacheError(MTARDError, RuntimeError):
    """Forward intermediates do not belong to the given parameters or batch."""


class CheckpointError(MTARDError, ValueError):
    """A checkpoint file is malformed or does not match the expected network."""


class DataFormatError(MTARDError, ValueError):
    """A dataset file does not follow its binary layout."""


class ConfigError(MTARDError, ValueError):
    """A configuration value is missing or invalid.

    ``field`` holds the dotted path of the offending entry when known.
    """

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class TrainingDivergedError(MTARDError, RuntimeError):
    """A training loss became non-finite."""
