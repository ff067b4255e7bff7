"""
Exception hierarchy for OCN.

Configuration problems derive from ValueError, numerical failures from
RuntimeError. The command line maps the first family to exit code 2 and
the second to exit code 1.
"""


class ConfigurationError(ValueError):
    """Invalid dimensions, settings, file contents or mismatched inputs."""


class ModeError(ConfigurationError):
    """Operation not supported for the field mode or system kind."""


class NumericError(RuntimeError):
    """Base class for failures of the numerics themselves."""


class NumericInputError(NumericError):
    """A state or direction vector contains NaN or infinity."""


class DivergenceError(NumericError):
    """Step budget exhausted or step size forced below its minimum."""


class BlowUpError(NumericError):
    """Integrated state became non-finite."""


class GenerationError(NumericError):
    """Dataset generation failed for a specific trajectory."""

    def __init__(self, message: str, trajectory: int):
        super().__init__(message)
        self.trajectory = trajectory


class TrainingError(NumericError):
    """Loss or gradient became non-finite during training."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration
