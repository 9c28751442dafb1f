"""Calibrated semi-supervised learning at desk scale."""

from .errors import ConfigurationError, InputError, StateError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "InputError", "StateError", "__version__"]
