"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid shapes, dimensions, or option values."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of an operation."""


class NumericError(RuntimeError):
    """A numeric primitive produced a non-finite value."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite value produced by '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class FitFailureError(RuntimeError):
    """A supervised fit missed its accuracy gate within the step budget."""


class TrainingError(RuntimeError):
    """All training restarts diverged or otherwise failed."""


class RecoveryFailureError(RuntimeError):
    """Prior recovery distillation missed its accuracy gate."""


class DegenerateRowError(RuntimeError):
    """A posterior-approximation row carries no probability mass."""
