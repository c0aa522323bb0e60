"""Exception types. The CLI maps each family to its own exit code."""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class FormatError(ValidationError):
    """A file does not follow the expected layout."""


class NumericalDomainError(ArithmeticError):
    """A formula was evaluated outside its domain (e.g. a non-positive denominator)."""


class UndefinedMetricError(NumericalDomainError):
    """A metric is undefined for the given inputs."""


class TrainingDivergedError(NumericalDomainError):
    """Boosting produced a non-finite loss. ``trace`` holds the rounds completed so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
