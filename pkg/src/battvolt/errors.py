"""Exception types shared across the package.

The CLI maps these onto distinct exit codes (see cli.py), so library code
should raise the most specific class that applies.
"""


class BattvoltError(Exception):
    """Base class for all battvolt errors."""


class ConfigError(BattvoltError):
    """Invalid or inconsistent run configuration."""


class DataError(BattvoltError):
    """Malformed, degenerate, or insufficient input data."""


class IntegrationDivergedError(BattvoltError):
    """A state became non-finite during ODE integration."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite state during integration at step {step}")
