"""Shared exception types mapped onto CLI exit codes."""


class ConfigError(ValueError):
    """Bad configuration file or option (exit code 2)."""


class InvariantViolation(RuntimeError):
    """A simulator invariant failed at runtime (exit code 3)."""


class EdgeListError(ValueError):
    """Malformed edge-list input; message carries the 1-based line number."""
