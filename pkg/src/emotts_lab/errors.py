"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain where the operation is defined."""


class ShapeError(ValueError):
    """Array shapes or widths do not agree."""


class NumericalError(ArithmeticError):
    """A computation produced NaN or Inf."""


class DegenerateBatchError(ValueError):
    """A batch carries no usable signal (e.g. every class skipped in LMMD)."""


class ConfigError(ValueError):
    """An experiment configuration is malformed; the message names the field path."""


class MissingInputError(FileNotFoundError):
    """A required input file or checkpoint does not exist."""
