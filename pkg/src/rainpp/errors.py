"""Exception types shared across the package."""


class RainppError(Exception):
    """Base class for package errors."""


class ConfigError(RainppError, ValueError):
    """Invalid configuration or arguments, detected before compute starts."""


class FormatError(RainppError, ValueError):
    """A binary file does not follow its declared layout."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DimensionOverflowError(FormatError):
    pass
