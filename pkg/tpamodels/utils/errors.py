"""
Exception types raised throughout the package.

All of them derive from ValueError so that callers which only
catch ValueError keep working.

Attributes:
-----------

TpaError: base class of every package-specific error.
"""


class TpaError(ValueError):
    """Base class for tpamodels errors."""


class ShapeError(TpaError):
    """Dimension mismatch between operands."""


class ConfigError(TpaError):
    """Invalid configuration, weights or mechanism description."""


class DegenerateRowError(TpaError):
    """A softmax row has every entry masked out."""


class EmptyInputError(TpaError):
    """Empty sequence or empty cache."""


class NonFiniteError(TpaError):
    """NaN or Inf found in factor inputs."""


class SerializationError(TpaError):
    """Corrupt or incompatible tensor file."""


class SpecParseError(TpaError):
    """
    Malformed mechanism spec file.

    Parameters:
    -----------

    message: str
        Description of the problem.

    lineno: int or None
        1-based line of the offending entry, if known.
    """

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f'line {lineno}: {message}'
        super().__init__(message)
