"""Exception types shared across the package."""


class InvalidInput(ValueError):
    pass


class ShapeError(ValueError):
    pass


class NumericalFailure(ArithmeticError):
    pass


class CorruptCheckpoint(ValueError):
    pass


class ConfigMismatch(ValueError):
    pass


class DivergenceError(ArithmeticError):
    """Raised when the training loss (or its gradient norm) becomes non-finite."""

    def __init__(self, step, loss, what="loss"):
        super().__init__(f"non-finite {what} {loss} at step {step}")
        self.step = step
        self.loss = loss
