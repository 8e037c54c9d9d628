"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad dimensions, missing keys, out-of-range values."""


class InputError(ValueError):
    """Invalid argument to an otherwise well-configured call."""


class UsageError(RuntimeError):
    """API called in the wrong order (e.g. stepping a finished episode)."""


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable, truncated, or incompatible."""


class NumericalError(ArithmeticError):
    """A non-finite value was produced.

    ``op`` names the operation (or loss term / feature) that produced it.
    """

    def __init__(self, op: str, message: str = ""):
        self.op = op
        super().__init__(f"non-finite value in {op}" + (f": {message}" if message else ""))
