"""Exception hierarchy shared by all engines."""


class BrwError(Exception):
    """Base class for toolkit errors raised by the engines."""


class DomainError(BrwError, ValueError):
    """A position lies outside the declared domain of a kernel."""


class DivergenceError(BrwError, ArithmeticError):
    """An integral or series did not converge below the configured cap."""


class RangeError(BrwError, ValueError):
    """A bound was evaluated outside its range of validity."""


class InvalidRegime(BrwError, ValueError):
    """Parameters put a bound outside the regime where it means anything."""


class DerivativeError(BrwError):
    """Required kernel derivatives are not available."""


class BudgetError(BrwError):
    """A nested Monte Carlo request exceeds the configured cost cap."""


class DegenerateWeights(BrwError):
    """Effective sample size fell below the configured floor."""


class ConfigError(BrwError, ValueError):
    """Experiment configuration failed validation."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class MissingOutput(BrwError):
    """A run directory lacks the outputs a report needs."""
