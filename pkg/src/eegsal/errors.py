"""Exception types shared across the package."""


class EegSalError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(EegSalError, ValueError):
    """Invalid configuration value or combination of values."""


class ContractError(EegSalError, ValueError):
    """An input violates a shape or value precondition."""


class IngestionError(EegSalError):
    """A dataset on disk is malformed. The message names the offending record."""

    def __init__(self, message, stimulus_id=None):
        super().__init__(message)
        self.stimulus_id = stimulus_id


class MetricError(EegSalError, ValueError):
    """A metric is undefined for the given inputs (e.g. zero variance)."""


class TrainingError(EegSalError, RuntimeError):
    """Optimization hit a non-finite value."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CheckpointError(EegSalError):
    """A checkpoint file is corrupt or refers to the wrong base checkpoint."""
