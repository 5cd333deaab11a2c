"""Exception hierarchy shared by every module."""


class Sparse4DError(Exception):
    """Base class for library errors."""


class DimensionError(Sparse4DError, ValueError):
    """Operand shapes do not fit the operation."""


class ContractError(Sparse4DError, ValueError):
    """A documented precondition was violated."""


class ConfigError(Sparse4DError, ValueError):
    """A configuration field failed validation.

    ``field`` names the offending dotted key so the CLI can echo it.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class NumericalError(Sparse4DError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""
