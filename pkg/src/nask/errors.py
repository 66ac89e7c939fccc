"""Exception types shared across the package."""


class NaskError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(NaskError, ValueError):
    """Operand shapes are incompatible."""


class UnsupportedOpError(NaskError, ValueError):
    """Requested operation variant is not implemented."""


class ContractError(NaskError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(NaskError, FloatingPointError):
    """Non-finite values where finite ones are required."""


class ConfigurationError(NaskError, ValueError):
    """Invalid hyper-parameter or configuration value."""


class MalformedAnnotationError(NaskError, ValueError):
    """A text annotation cannot be turned into geometry."""


class DegenerateOrientationError(NaskError, ValueError):
    """An orientation vector is too short to normalize."""


class ParseError(NaskError, ValueError):
    """Annotation text could not be parsed.

    ``line`` is the 1-based line number of the offending record.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
