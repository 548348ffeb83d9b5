"""Exception types raised across the package."""


class AdapterMixError(Exception):
    """Base class for all package errors."""


class DimensionError(AdapterMixError, ValueError):
    pass


class DegenerateInputError(AdapterMixError, ValueError):
    pass


class ContractError(AdapterMixError, RuntimeError):
    pass


class StateError(AdapterMixError, RuntimeError):
    pass


class IdError(AdapterMixError, IndexError):
    pass


class BudgetError(AdapterMixError, ValueError):
    pass


class DivergenceError(AdapterMixError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
