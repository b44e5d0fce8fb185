"""Exception hierarchy shared across the package."""


class RlPipeError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RlPipeError, ValueError):
    pass


class DegenerateDataError(RlPipeError, ValueError):
    """Identification data cannot pin down every polynomial coefficient."""


class SimulationDivergedError(RlPipeError, FloatingPointError):
    pass


class TrainingDivergedError(RlPipeError, FloatingPointError):
    """A SAC loss became non-finite; ``loss_name``/``value`` identify it."""

    def __init__(self, loss_name, value, step=None):
        self.loss_name = loss_name
        self.value = value
        self.step = step
        where = f" at update {step}" if step is not None else ""
        super().__init__(f"{loss_name} became non-finite ({value!r}){where}")


class StateError(RlPipeError, RuntimeError):
    pass


class ConfigError(RlPipeError, ValueError):
    pass


class GateFailedError(RlPipeError):
    """A stage exhausted its repeats without passing its gate."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class FollowFailedError(RlPipeError):
    """A sub-goal was not reached before the timeout."""

    def __init__(self, message, trace=None, metrics=None):
        super().__init__(message)
        self.trace = trace
        self.metrics = metrics
