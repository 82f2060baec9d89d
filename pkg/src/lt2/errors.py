"""Exception types shared across the package."""


class LT2Error(Exception):
    pass


class DimensionError(LT2Error, ValueError):
    """Operand shapes are incompatible."""


class ContractError(LT2Error, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(LT2Error, ArithmeticError):
    """NaN/Inf encountered where a finite value is required."""


class BudgetError(LT2Error, ValueError):
    """Input is too large for an O(L^2) reference routine."""


class ParseError(LT2Error, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TokenizerError(LT2Error, ValueError):
    pass


class ConfigError(LT2Error, ValueError):
    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
