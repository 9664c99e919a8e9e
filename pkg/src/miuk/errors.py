"""Exception hierarchy shared across the package."""


class MiukError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MiukError):
    """Tensor shapes do not conform to an operation's contract."""


class NumericError(MiukError):
    """A computation produced or received numerically invalid values."""


class ConfigError(MiukError):
    """A configuration value or combination is invalid."""


class FormatError(MiukError):
    """A file does not match its declared on-disk format."""


class CompatibilityError(MiukError):
    """Artifacts (checkpoint, vocabulary, config) do not fit together."""
