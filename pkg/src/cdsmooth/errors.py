"""Exception types raised across the package."""

import numpy as np


class ConfigurationError(ValueError):
    """Invalid model, grid, engine or experiment configuration."""


class EvaluationError(RuntimeError):
    """A model function produced a non-finite value or could not be evaluated."""


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Covariance factorization failed even after jitter escalation."""

    def __init__(self, message, jitter=None):
        super().__init__(message)
        self.jitter = jitter


class DivergenceError(RuntimeError):
    """An integration produced non-finite states or lost positive semidefiniteness."""

    def __init__(self, message, node=None, iteration=None):
        super().__init__(message)
        self.node = node
        self.iteration = iteration


class UpdateError(RuntimeError):
    """Innovation covariance of a measurement update is not positive definite."""


class ResourceError(RuntimeError):
    """A requested computation exceeds a configured size cap."""
