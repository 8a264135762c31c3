"""Error taxonomy shared across the package."""


class DimensionError(ValueError):
    """Shapes passed to an operation are incompatible with its contract."""


class ContractError(ValueError):
    """An operation was invoked outside its documented preconditions."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""
