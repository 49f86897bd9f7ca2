"""Shared exception types."""


class ContractViolation(ValueError):
    """An operation was called with inputs that break its contract."""


class ConfigurationError(ValueError):
    """A static configuration value is invalid (grid, eps, stride, config file)."""


class FormatError(ValueError):
    """A serialized artifact (cloud file, weights file, manifest) is malformed."""


class GenerationError(RuntimeError):
    """Synthetic scene generation could not satisfy its constraints."""
