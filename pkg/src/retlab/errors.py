"""Exception types shared across the package."""


class RetlabError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(RetlabError, ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class DomainError(RetlabError, ValueError):
    """Numeric argument outside the mathematical domain of an operation."""


class NumericError(RetlabError, ArithmeticError):
    """NaN or infinity showed up where a finite value is required."""


class ContractError(RetlabError, ValueError):
    """A documented precondition was violated by the caller."""


class InputError(RetlabError, ValueError):
    """User-supplied data is malformed, missing, or inconsistent."""


class ParseError(InputError):
    """A text file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line_no: int | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class ConfigError(InputError):
    """Invalid or inconsistent configuration."""
