class BlockCGError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(BlockCGError, ValueError):
    pass


class DimensionError(BlockCGError, ValueError):
    pass


class SingularGramError(BlockCGError, ArithmeticError):
    """A Gram matrix is not numerically positive definite."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class SingularTriangularError(BlockCGError, ArithmeticError):
    """A triangular factor has a (numerically) zero pivot."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class EmptyDirectionError(BlockCGError, ArithmeticError):
    """Every direction was truncated away in the breakdown-free variant."""


class MatrixMarketError(BlockCGError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PreconditionerError(BlockCGError, ArithmeticError):
    pass
