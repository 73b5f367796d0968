"""Exception hierarchy shared across the package.

Exit-code contract for the CLI: 0 success, 1 usage error, 2 data error,
3 numeric failure.
"""


class LCDetError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2


class UsageError(LCDetError):
    """Bad flags, missing paths, unusable invocation."""

    exit_code = 1


class DataError(LCDetError):
    """Malformed or inconsistent input data (configs, files, shapes)."""

    exit_code = 2


class ConfigError(DataError):
    """Invalid network or layer configuration."""


class NumericError(LCDetError):
    """Numeric failure at runtime (NaN/Inf loss, divergence)."""

    exit_code = 3


class ModelFormatError(DataError):
    """Base for model-file decoding failures."""


class BadMagicError(ModelFormatError):
    """File does not start with the model-file magic."""


class VersionError(ModelFormatError):
    """Model-file version not supported."""


class ChecksumError(ModelFormatError):
    """Payload CRC32 mismatch."""


class TruncatedError(ModelFormatError):
    """File ends before a declared payload is complete."""
