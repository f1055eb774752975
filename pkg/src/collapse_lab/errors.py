"""Exception types shared across the lab."""


class ContractError(ValueError):
    """An input violates an operation's preconditions."""


class CausalityError(ContractError):
    """A key position lies after its query position."""


class NumericalFailure(ArithmeticError):
    """A computation produced a non-finite value or overflowed a format."""

    def __init__(self, message, layer=None, token=None):
        where = []
        if layer is not None:
            where.append(f"layer {layer}")
        if token is not None:
            where.append(f"token {token}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.layer = layer
        self.token = token


class InvariantViolation(AssertionError):
    """A property that should hold by construction was observed to fail."""
