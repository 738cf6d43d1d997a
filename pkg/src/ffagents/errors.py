"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its preconditions."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class NonConvergence(RuntimeError):
    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class NumericalFailure(RuntimeError):
    """Non-finite loss or gradient during a learner update."""

    def __init__(self, message, diagnostics=None, context=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.context = context or {}


class CheckpointError(ValueError):
    """Checkpoint is corrupted, of an unknown version or architecture-incompatible."""
