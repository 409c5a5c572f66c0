"""Exception types mapped to CLI exit codes."""


class ConfigError(ValueError):
    """Invalid or malformed configuration (exit code 2)."""


class DataError(ValueError):
    """Dataset or input data violates an operation's contract (exit code 3)."""


class DivergenceError(RuntimeError):
    """Numeric divergence during training or evaluation (exit code 4)."""
