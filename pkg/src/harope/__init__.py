"""Rotary positional encodings with head-wise adaptive pre-rotary transforms."""

__version__ = "0.1.0"


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class ConfigurationError(ValueError):
    """A parameter structure or run configuration is malformed."""
