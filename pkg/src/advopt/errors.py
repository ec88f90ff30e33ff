"""Exception hierarchy shared across the package."""


class AdvoptError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(AdvoptError):
    """Operands or configured shapes do not compose."""


class NonFiniteError(AdvoptError):
    """A NaN or Inf surfaced where only finite values are allowed."""


class DataFormatError(AdvoptError):
    """A file (IDX data, checkpoint, config) failed to parse or validate."""


class ConfigError(AdvoptError):
    """Invalid configuration value or combination."""


class DivergenceError(AdvoptError):
    """Training produced a non-finite loss."""
