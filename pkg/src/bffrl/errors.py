"""Exception types raised across the package."""

from __future__ import annotations


class BFFError(Exception):
    """Base class for all package errors."""


class SpecError(BFFError, ValueError):
    """A model specification or configuration is malformed."""


class ConvergenceError(BFFError, RuntimeError):
    """An iterative procedure did not converge."""


class EstimatorError(BFFError, ValueError):
    """A gradient estimator was called with inputs it cannot handle."""


class DivergenceError(BFFError, RuntimeError):
    """Training blew up. ``trace`` holds the error trace recorded so far."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class InsufficientSamplesError(BFFError, RuntimeError):
    """A Monte-Carlo quantity could not be resolved above its noise level."""
