"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class DataError(RuntimeError):
    """Dataset or checkpoint I/O failure (missing, corrupt, wrong version)."""


class TrainingError(RuntimeError):
    """Training diverged or hit an invalid state; message carries the step."""


class PipelineError(RuntimeError):
    """A pipeline stage was invoked without its prerequisites."""
