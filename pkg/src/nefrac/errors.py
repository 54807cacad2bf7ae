"""Exception hierarchy.

The CLI maps these onto exit codes: ConfigError -> 2, any NumericalError
subclass -> 3, GateFailure -> 4.
"""


class NefracError(Exception):
    """Base class for all library errors."""


class ConfigError(NefracError):
    """Invalid configuration, unknown model name, malformed input file."""


class NumericalError(NefracError):
    """Base class for failures of numerical procedures."""


class EvaluationError(NumericalError):
    """A model function returned non-finite values.

    Carries the offending state so the caller can see where the model blew up.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class ModelDefinitionError(NumericalError):
    """A model violates a structural requirement (PSD, Metzler, ...)."""


class DecompositionError(NumericalError):
    """The (sigma, C) pair does not satisfy sigma sigma* = C(v)w."""


class EquilibriumError(NumericalError):
    """Fixed-point solve failed: divergence, trivial root, bad kernel."""


class BasinError(NumericalError):
    """The deterministic flow did not converge from the given start."""


class SimulationError(NumericalError):
    """A stochastic path produced non-finite state."""

    def __init__(self, message, step=None, seed=None):
        super().__init__(message)
        self.step = step
        self.seed = seed


class ConsistencyError(NumericalError):
    """Two independent routes to the same quantity disagree."""


class GateFailure(NefracError):
    """A validation gate did not pass (used by the CLI for exit code 4)."""
