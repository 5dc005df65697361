"""Exception types raised across the package."""


class ValidationError(ValueError):
    """Input failed a shape, finiteness or domain check."""


class NumericalError(ArithmeticError):
    """A numerical routine could not produce a trustworthy result."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class ConvergenceError(RuntimeError):
    """An iterative fit ran out of budget; ``best`` holds the best iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best
