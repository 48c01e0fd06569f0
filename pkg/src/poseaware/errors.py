"""Exception hierarchy shared across the package."""

from __future__ import annotations


class PoseAwareError(Exception):
    """Base class for all package errors."""


class ShapeError(PoseAwareError, ValueError):
    """Incompatible tensor or token geometry."""


class ContractError(PoseAwareError, RuntimeError):
    """An operation was called outside its contract (e.g. non-scalar backward)."""


class NumericalError(PoseAwareError, ArithmeticError):
    """NaN/Inf where a finite value is required."""


class DomainError(NumericalError):
    """Input outside the mathematical domain of an operation."""


class ValidationError(PoseAwareError, ValueError):
    """Malformed keypoints, maps or generator specs."""


class ConfigError(PoseAwareError, ValueError):
    """Invalid model or experiment configuration.

    ``field`` names the offending configuration key when known.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class DataError(PoseAwareError, IOError):
    """Unreadable, corrupt or incompatible dataset/checkpoint on disk."""
