"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument is outside the domain an operation accepts."""


class ParameterDomainError(DomainError):
    """A model parameter violates its constraint (e.g. non-positive timescale)."""


class FormatError(ValueError):
    """A contact-map file could not be parsed or violates map invariants."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConvergenceError(RuntimeError):
    """An iterative routine stopped before reaching its tolerance."""

    def __init__(self, message, residual):
        self.residual = residual
        super().__init__(f"{message} (residual={residual:.3e})")


class ScaleError(ValueError):
    """A normalization scale could not be determined."""


class NumericalError(RuntimeError):
    """Training produced a non-finite value."""

    def __init__(self, message, step=None, batch=None):
        self.step = step
        self.batch = batch
        super().__init__(f"{message} (step={step}, batch={batch})")
