"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of a primitive."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """A run configuration failed validation; maps to CLI exit code 2."""


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss; maps to CLI exit code 3."""
