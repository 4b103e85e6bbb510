"""Exception hierarchy shared by every replaysim module."""


class ReplaySimError(Exception):
    """Base class for all errors raised by replaysim."""


class ConfigError(ReplaySimError, ValueError):
    """Invalid configuration value, dataset spec or schedule range."""

    def __init__(self, message: str, key: str = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ContractError(ReplaySimError, ValueError):
    """A documented precondition of an operation was violated."""


class DimensionError(ReplaySimError, ValueError):
    """Tensor shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class ScheduleIndexError(ReplaySimError, IndexError):
    """Diffusion time index outside the schedule."""


class TrainingError(ReplaySimError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, phase: str = None, task: int = None, step: int = None):
        self.phase = phase
        self.task = task
        self.step = step
        context = ", ".join(
            f"{name}={value}"
            for name, value in (("phase", phase), ("task", task), ("step", step))
            if value is not None
        )
        super().__init__(f"{message} ({context})" if context else message)


class ProtocolError(ReplaySimError, RuntimeError):
    """The continual-learning protocol was driven into an invalid state."""


class ArtifactError(ReplaySimError, FileNotFoundError):
    """A run artifact (record, checkpoint, config copy) is missing or unreadable."""
