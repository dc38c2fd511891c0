"""Exception types raised across the package."""

from __future__ import annotations

import numpy as np


class CencovError(Exception):
    """Base class for all package errors."""


class InvalidInputError(CencovError, ValueError):
    """Malformed data, dimensions or parameter values."""


class ConfigurationError(CencovError, ValueError):
    """An estimator specification or nuisance bundle is inconsistent."""


class SingularMatrixError(CencovError, np.linalg.LinAlgError):
    """A matrix that must be inverted is numerically singular."""


class DegenerateDenominatorError(CencovError, ArithmeticError):
    """An expectation used as a denominator is numerically zero."""


class ConvergenceError(CencovError, RuntimeError):
    """An iterative solver stopped before meeting its tolerance.

    Attributes
    ----------
    last : ndarray
        Last iterate.
    residual : float
        Infinity norm of the averaged estimating function at ``last``.
    iterations : int
    """

    def __init__(self, message, last=None, residual=float("nan"), iterations=0, stage=None):
        super().__init__(message)
        self.last = None if last is None else np.asarray(last, dtype=float)
        self.residual = residual
        self.iterations = iterations
        self.stage = stage

    def __str__(self):
        base = super().__str__()
        return f"[{self.stage}] {base}" if self.stage else base
