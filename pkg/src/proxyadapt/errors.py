"""Exception types shared across the package."""


class ProxyAdaptError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ProxyAdaptError, ValueError):
    pass


class DomainError(ProxyAdaptError, ValueError):
    """A log-ratio or reward would be non-finite."""


class InternalConsistencyError(ProxyAdaptError, RuntimeError):
    pass


class UndefinedRepresentativeError(ProxyAdaptError, KeyError):
    """A table-mode adapter was queried off its representatives."""


class TrainingDivergedError(ProxyAdaptError, RuntimeError):
    def __init__(self, step: int, message: str = "loss became non-finite"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class ConditionViolation(ProxyAdaptError):
    def __init__(self, condition: int, message: str):
        super().__init__(f"condition {condition} violated: {message}")
        self.condition = condition


class GenerationFailedError(ProxyAdaptError, RuntimeError):
    pass


class FixtureInvalidError(ProxyAdaptError, RuntimeError):
    pass
