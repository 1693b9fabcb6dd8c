"""Exception hierarchy shared across the package."""


class ASDError(Exception):
    """Base class for all package errors."""


class DimensionError(ASDError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(ASDError, ValueError):
    """An argument lies outside the operation's domain."""


class DegenerateInputError(ASDError, ValueError):
    """Input is too short, silent or otherwise degenerate."""


class ContractError(ASDError, RuntimeError):
    """A caller violated an API precondition."""


class FormatError(ASDError, ValueError):
    """A file does not follow the expected binary layout."""


class ParseError(ASDError, ValueError):
    """A text file contains a malformed line."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class ConfigurationError(ASDError, ValueError):
    """Settings or data make the requested operation impossible."""


class NonFiniteGradientError(ASDError, FloatingPointError):
    """An optimizer received a NaN or infinite gradient."""
