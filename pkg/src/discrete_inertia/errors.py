class SimulationError(Exception):
    """Base class for all errors raised by the package."""


class ModelError(SimulationError):
    """Inconsistent system description (dangling references, unknown ids)."""


class ParameterError(SimulationError, ValueError):
    """A parameter is outside its admissible range."""


class InitializationError(SimulationError):
    """The initial algebraic solution could not be found."""


class StepFailure(SimulationError):
    """Newton iteration of an integration step did not converge."""

    def __init__(self, message, t=None, bus=None, mismatch=None):
        super().__init__(message)
        self.t = t
        self.bus = bus
        self.mismatch = mismatch


class InsufficientDataError(SimulationError, ValueError):
    """A series is too short for the requested analysis."""


class ScenarioError(SimulationError):
    """Scenario definition is malformed. ``problems`` lists every issue found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
