"""Exception hierarchy shared by every module."""


class DyngateError(Exception):
    """Base class for all package errors."""


class DimensionError(DyngateError, ValueError):
    """Operand shapes are incompatible."""


class LabelError(DyngateError, ValueError):
    """A class label is outside ``0..K-1``."""


class DegenerateBatchError(DyngateError, ValueError):
    """Batch statistics cannot be computed (a single element per channel)."""


class OracleError(DyngateError, ArithmeticError):
    """Finite-difference oracle hit a non-finite value."""


class ValidationError(DyngateError, ValueError):
    """Argument or config value outside its documented domain."""


class ParseError(DyngateError, ValueError):
    """Text input could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(DyngateError, ValueError):
    """Binary or text file does not follow its documented format."""


class UnknownDomainError(DyngateError, KeyError):
    """Scene name has no prompt embedding and strict lookup was requested."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown domain"


class DivergenceError(DyngateError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""
