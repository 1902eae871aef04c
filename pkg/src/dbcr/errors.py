"""Exception types mapped to CLI exit codes (2 config, 3 numerical, 4 I/O)."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared at a known timestep or step."""

    def __init__(self, message: str, *, step: int | None = None, t: int | None = None):
        super().__init__(message)
        self.step = step
        self.t = t


class TrainingDivergence(NumericalError):
    pass


class CheckpointError(OSError):
    """Checkpoint file is malformed or fails its integrity checks."""
