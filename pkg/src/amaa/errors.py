"""Exception types shared across the package.

Everything derives from AmaaError so callers can catch the package's own
failures without swallowing programming errors. ConfigError and ShapeError
are ValueErrors on top of that, since that is what most numpy code expects.
"""


class AmaaError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(AmaaError, ValueError):
    """An array has the wrong shape, dtype, rank, or channel count."""


class ConfigError(AmaaError, ValueError):
    """A configuration value is missing, unknown, or out of its valid range."""


class DataFormatError(AmaaError, ValueError):
    """A file on disk does not match the expected binary or JSON layout.

    The message includes a byte offset or key path whenever one is known.
    """


class TrainingError(AmaaError, RuntimeError):
    """Training cannot continue (for example a loss term went non-finite)."""
