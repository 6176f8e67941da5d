class TdoDifError(Exception):
    """Base class for all package errors."""


class ConfigError(TdoDifError, ValueError):
    """Invalid parameters, config files, or manifests."""


class FormatError(TdoDifError, ValueError):
    """A file on disk does not match its expected binary or text layout."""
