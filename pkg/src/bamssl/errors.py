"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid hyperparameter, shape, or configuration value."""


class InputError(ValueError):
    """Malformed data handed to an operation (bad CSV row, empty batch, ...)."""


class StateError(RuntimeError):
    """Operation called out of order, e.g. backward before forward."""
