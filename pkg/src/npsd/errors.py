"""Exception types raised across the package."""


class NpsdError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(NpsdError, ValueError):
    pass


class TooShortError(NpsdError, ValueError):
    pass


class InsufficientHistoryError(NpsdError, ValueError):
    pass


class DegenerateInputError(NpsdError, ValueError):
    pass


class SampleRateError(NpsdError, ValueError):
    pass


class ConfigurationError(NpsdError):
    pass


class FormatError(NpsdError):
    """Malformed binary container (bad magic, truncated payload, bad dims)."""


class UnsupportedVersionError(FormatError):
    pass


class ShapeMismatchError(NpsdError, ValueError):
    pass


class TrainingDivergedError(NpsdError, RuntimeError):
    pass
