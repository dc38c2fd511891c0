"""Sandwich variance for M-estimators, with optional nuisance correction.

For an estimating function ``Phi`` with root ``theta_hat``::

    A = mean_i d Phi_i / d theta^T        (numerical, at theta_hat)
    B = mean_i Phi_i Phi_i^T
    cov = A^{-1} B A^{-T} / n

When nuisance parameters ``alpha`` were estimated from their own estimating
function ``Phi_alpha`` with mean Jacobian ``J``, the meat uses the corrected
contributions ``Phi_i - E[d Phi / d alpha^T] J^{-1} Phi_alpha,i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import ndtri

from .errors import SingularMatrixError
from .numerics import numeric_jacobian

__all__ = [
    "SandwichParts",
    "sandwich_parts",
    "sandwich_covariance",
    "sandwich",
    "confidence_intervals",
    "normal_quantile",
]

COND_LIMIT = 1e10


@dataclass
class SandwichParts:
    """Bread and meat of the sandwich.

    Attributes
    ----------
    A : ndarray, shape (p, p)
        Mean Jacobian of the estimating function.
    B : ndarray, shape (p, p)
        Mean outer product of the estimating function.
    B_corrected : ndarray, optional
        Meat after correcting for estimated nuisance parameters.
    phi : ndarray, shape (n, p)
    phi_corrected : ndarray, optional
    condition_number : float
    """

    A: np.ndarray
    B: np.ndarray
    B_corrected: Optional[np.ndarray] = None
    phi: Optional[np.ndarray] = None
    phi_corrected: Optional[np.ndarray] = None
    condition_number: float = float("nan")


def sandwich_parts(phi_fn: Callable, theta, rebuild: Optional[Callable] = None, nuisance=None,
                   blocks: Sequence = (), step: float = 1e-6) -> SandwichParts:
    """Compute bread and meat at ``theta``.

    Parameters
    ----------
    phi_fn : callable
        ``phi_fn(theta) -> (n, p)`` per-record estimating function.
    rebuild : callable, optional
        ``rebuild(bundle) -> phi_fn`` for a nuisance bundle with perturbed
        parameters; needed for the nuisance correction.
    nuisance : NuisanceBundle, optional
    blocks : sequence of NuisanceBlock
    """
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi_fn(theta))
    n = phi.shape[0]
    A = numeric_jacobian(lambda t: phi_fn(t).mean(0), theta, step * (1 + np.abs(theta)))
    B = phi.T @ phi / n
    cond = float(np.linalg.cond(A))
    parts = SandwichParts(A, B, phi=phi, condition_number=cond)
    if blocks and rebuild is not None:
        corrected = phi.copy()
        for blk in blocks:
            def mean_phi(a, blk=blk):
                return rebuild(blk.rebuild(nuisance, a))(theta).mean(0)

            A_alpha = np.atleast_2d(numeric_jacobian(mean_phi, blk.params,
                                                     1e-5 * (1 + np.abs(blk.params))))
            corrected -= (A_alpha @ np.linalg.solve(blk.jacobian, blk.scores.T)).T
        parts.phi_corrected = corrected
        parts.B_corrected = corrected.T @ corrected / n
    return parts


def sandwich_covariance(parts: SandwichParts, n: int, corrected: bool = True) -> np.ndarray:
    """``A^{-1} B A^{-T} / n`` using the corrected meat when available."""
    if not np.isfinite(parts.condition_number) or parts.condition_number > COND_LIMIT:
        raise SingularMatrixError(
            f"bread matrix is ill conditioned (condition number {parts.condition_number:.3g})"
        )
    meat = parts.B_corrected if corrected and parts.B_corrected is not None else parts.B
    a_inv = np.linalg.inv(parts.A)
    cov = a_inv @ meat @ a_inv.T / n
    return 0.5 * (cov + cov.T)


def sandwich(data, spec, theta_hat, nuisance, nuisance_scores: Sequence = (), lam=None,
             pilot_theta=None):
    """Sandwich covariance of ``theta_hat`` for an estimator specification.

    ``nuisance_scores`` is a sequence of :class:`~cencov.nuisance.NuisanceBlock`
    objects; when given, the meat is corrected for their estimation.
    """
    from .estimators import PhiModel

    pilot = theta_hat if pilot_theta is None else pilot_theta

    def build(bundle):
        return PhiModel(spec, data, bundle, lam, pilot_theta=pilot)

    blocks = list(nuisance_scores)
    parts = sandwich_parts(build(nuisance), theta_hat, build if blocks else None, nuisance, blocks)
    return sandwich_covariance(parts, data.n, corrected=True)


def normal_quantile(p):
    """Standard normal quantile."""
    return ndtri(p)


def confidence_intervals(fit, level: float = 0.95) -> np.ndarray:
    """Wald intervals ``theta_hat +/- z_{(1+level)/2} SE``; shape ``(p, 2)``."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    zq = normal_quantile(0.5 * (1 + level))
    th = np.asarray(fit.theta_hat, dtype=float)
    se = np.asarray(fit.se, dtype=float)
    return np.column_stack([th - zq * se, th + zq * se])
