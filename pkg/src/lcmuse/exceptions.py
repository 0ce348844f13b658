"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when tensor operands have incompatible shapes."""


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration input."""


class NumericalError(RuntimeError):
    """Raised when an iterative computation produces non-finite values.

    Carries an optional ``state`` dict with diagnostic context (last iterate,
    loss history, step index) so callers can dump it for post-mortem analysis.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = dict(state) if state else {}


class ReportIntegrityError(RuntimeError):
    """Raised when a stored verification report is internally inconsistent."""


class GradientWarning(UserWarning):
    """Warning category for differentiation edge cases (unreachable inputs)."""


class ConvergenceWarning(UserWarning):
    """Warning category for iterative solvers stopping before tolerance."""
