"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the domain of a function."""


class NotPositiveDefiniteError(DomainError):
    def __init__(self, pivot: int, value: float):
        super().__init__(f"matrix is not positive definite: pivot {pivot} is {value!r}")
        self.pivot = pivot
        self.value = value


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, last_iterate=None, last_value: float | None = None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.last_value = last_value


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class DegenerateTestError(ValueError):
    """A statistical test has no information (e.g. all paired differences are zero)."""


class PretrainError(RuntimeError):
    """The base model failed to reach the required source-task accuracy."""
