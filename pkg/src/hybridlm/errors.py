"""Exception types shared across the package."""


class HybridLMError(Exception):
    """Base class for all package errors."""


class PreconditionError(HybridLMError, ValueError):
    """An operation was called with inputs violating its contract."""


class SingularityError(HybridLMError, ZeroDivisionError):
    """A schedule weight was requested at its singular point."""


class ConfigError(HybridLMError, ValueError):
    """Invalid or inconsistent run configuration."""


class CacheCoherenceError(HybridLMError, RuntimeError):
    """A cached forward pass referenced keys that are neither cached nor new."""


class CheckpointError(HybridLMError, RuntimeError):
    """Checkpoint file is malformed or has an incompatible format version."""


class DivergenceError(HybridLMError, RuntimeError):
    """Training produced a non-finite loss."""
