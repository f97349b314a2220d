"""Exception types shared across the package."""


class CountAdaptError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CountAdaptError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class UsageError(CountAdaptError, RuntimeError):
    """An API was called in an invalid way (e.g. backward on a spent graph)."""


class ConfigError(CountAdaptError, ValueError):
    """A configuration value is missing, inconsistent, or out of range."""


class ValidationError(CountAdaptError, ValueError):
    """Input data failed validation (bad annotation, bad box, bad file)."""


class PlacementError(CountAdaptError, RuntimeError):
    """Synthetic objects could not be placed under the overlap constraint."""


class CheckpointError(CountAdaptError, RuntimeError):
    """A checkpoint file is corrupt, truncated, or does not match the model."""


class TrainingError(CountAdaptError, RuntimeError):
    """Training hit an unrecoverable state (e.g. a non-finite loss)."""
