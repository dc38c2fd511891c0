"""Numerical kernels shared by every estimator.

Root solving for estimating equations, central-difference Jacobians,
the normal upper tail, Gauss-Hermite rules and seeded multivariate
normal draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .errors import ConvergenceError, InvalidInputError, SingularMatrixError

__all__ = [
    "SolverConfig",
    "SolverResult",
    "solve_estimating_equation",
    "numeric_jacobian",
    "normal_upper_tail",
    "log_normal_upper_tail",
    "gauss_hermite",
    "mvn_sample",
    "replication_rng",
]


@dataclass(frozen=True)
class SolverConfig:
    """Settings for the damped Newton solver.

    Parameters
    ----------
    max_iter : int
        Maximum number of Newton iterations.
    tol : float
        Convergence threshold on the infinity norm of the averaged
        estimating function.
    step_damping : float
        Initial fraction of the Newton step that is attempted.
    jacobian_step : float
        Relative finite-difference step; the absolute step for component
        ``j`` is ``jacobian_step * (1 + |x_j|)``.
    """

    max_iter: int = 100
    tol: float = 1e-8
    step_damping: float = 1.0
    jacobian_step: float = 1e-6

    def __post_init__(self):
        if self.max_iter < 1:
            raise InvalidInputError("max_iter must be at least 1")
        if not self.tol >= 0:
            raise InvalidInputError("tol must be non-negative")
        if not 0 < self.step_damping <= 1:
            raise InvalidInputError("step_damping must lie in (0, 1]")


@dataclass
class SolverResult:
    """Root returned by :func:`solve_estimating_equation` with diagnostics."""

    x: np.ndarray
    residual: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def numeric_jacobian(f: Callable[[np.ndarray], np.ndarray], x, h=None) -> np.ndarray:
    """Central-difference Jacobian of a vector function.

    Parameters
    ----------
    f : callable
        Maps a length-p vector to a length-m vector.
    x : array_like
        Evaluation point.
    h : float or array_like, optional
        Absolute step per coordinate. Defaults to ``1e-6 * (1 + |x|)``.

    Returns
    -------
    ndarray
        The ``(m, p)`` matrix whose column ``j`` is
        ``(f(x + h_j e_j) - f(x - h_j e_j)) / (2 h_j)``.
    """
    x = np.asarray(x, dtype=float)
    if h is None:
        h = 1e-6 * (1.0 + np.abs(x))
    h = np.broadcast_to(np.asarray(h, dtype=float), x.shape)
    cols = []
    for j in range(x.size):
        step = np.zeros_like(x)
        step[j] = h[j]
        hi = np.asarray(f(x + step), dtype=float)
        lo = np.asarray(f(x - step), dtype=float)
        cols.append((hi - lo) / (2.0 * h[j]))
    return np.stack(cols, axis=-1)


def _newton_direction(jac, resid):
    if not np.any(jac):
        raise SingularMatrixError("Jacobian is identically zero")
    try:
        if np.linalg.cond(jac) > 1e14:
            raise np.linalg.LinAlgError
        return np.linalg.solve(jac, -resid)
    except np.linalg.LinAlgError:
        pass
    ridge = 1e-8 * max(1.0, float(np.max(np.abs(jac))))
    reg = jac + ridge * np.eye(jac.shape[0])
    try:
        if np.linalg.cond(reg) > 1e14:
            raise np.linalg.LinAlgError
        return np.linalg.solve(reg, -resid)
    except np.linalg.LinAlgError:
        raise SingularMatrixError("Jacobian is singular even after a 1e-8 ridge") from None


def solve_estimating_equation(
    phi_mean: Callable[[np.ndarray], np.ndarray],
    theta0,
    cfg: SolverConfig | None = None,
    positive: Sequence[int] = (-1,),
    lower_bound: float = 1e-8,
) -> SolverResult:
    """Find a root of an averaged estimating function by damped Newton.

    Parameters
    ----------
    phi_mean : callable
        Returns ``n^{-1} sum_i phi_i(theta)``.
    theta0 : array_like
        Starting value.
    cfg : SolverConfig, optional
    positive : sequence of int
        Indices that must stay above ``lower_bound`` (scale parameters).
    lower_bound : float

    Returns
    -------
    SolverResult

    Raises
    ------
    ConvergenceError
        When the residual is still above ``cfg.tol`` after ``cfg.max_iter``
        iterations; the exception carries the last iterate.
    """
    cfg = cfg or SolverConfig()
    x = np.array(theta0, dtype=float)
    positive = [i % x.size for i in positive]

    def feasible(v):
        return all(v[i] > lower_bound for i in positive) and np.all(np.isfinite(v))

    if not feasible(x):
        raise InvalidInputError("starting value violates the positivity guard")
    r = np.asarray(phi_mean(x), dtype=float)
    norm = float(np.max(np.abs(r)))
    history = [norm]
    for it in range(1, cfg.max_iter + 1):
        if norm <= cfg.tol:
            return SolverResult(x, norm, it - 1, True, history)
        jac = numeric_jacobian(phi_mean, x, cfg.jacobian_step * (1.0 + np.abs(x)))
        direction = _newton_direction(jac, r)
        t = cfg.step_damping
        best = None
        for _ in range(40):
            cand = x + t * direction
            if feasible(cand):
                rc = np.asarray(phi_mean(cand), dtype=float)
                nc = float(np.max(np.abs(rc)))
                if np.isfinite(nc) and nc < norm:
                    best = (cand, rc, nc)
                    break
                if best is None and np.isfinite(nc):
                    best = (cand, rc, nc)
            t *= 0.5
        if best is None:
            raise ConvergenceError("no finite step found", x, norm, it)
        x, r, norm = best
        history.append(norm)
    if norm <= cfg.tol:
        return SolverResult(x, norm, cfg.max_iter, True, history)
    raise ConvergenceError(
        f"no convergence after {cfg.max_iter} iterations (residual {norm:.3g})",
        x, norm, cfg.max_iter,
    )


def normal_upper_tail(t):
    """Upper tail ``1 - Phi(t)`` of the standard normal.

    Evaluated as ``ndtr(-t)``, which uses the complementary error
    function and keeps full relative precision in the far right tail.
    """
    return special.ndtr(-np.asarray(t, dtype=float))


def log_normal_upper_tail(t):
    """Logarithm of :func:`normal_upper_tail`, stable for large ``t``."""
    return special.log_ndtr(-np.asarray(t, dtype=float))


def _hermite_functions(x, n):
    """Orthonormal Hermite functions ``psi_{n-1}(x), psi_n(x)`` and ``sum_{k<n} psi_k(x)^2``."""
    prev = np.zeros_like(x)
    cur = np.pi**-0.25 * np.exp(-0.5 * x**2)
    total = cur**2
    for k in range(1, n + 1):
        prev, cur = cur, x * np.sqrt(2.0 / k) * cur - np.sqrt((k - 1) / k) * prev
        if k < n:
            total = total + cur**2
    return prev, cur, total


@lru_cache(maxsize=64)
def _gauss_hermite_cached(n: int):
    k = np.arange(1, n)
    off = np.sqrt(k / 2.0)
    jacobi = np.diag(off, 1) + np.diag(off, -1)
    nodes = np.linalg.eigvalsh(jacobi)
    # Newton polish on the Hermite function of degree n
    for _ in range(3):
        prev, cur, _ = _hermite_functions(nodes, n)
        nodes = nodes - cur / (np.sqrt(2.0 * n) * prev)
    _, _, total = _hermite_functions(nodes, n)
    # Christoffel numbers; the exp(-x^2) factor keeps tail weights at full relative precision
    weights = np.exp(-nodes**2) / total
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def gauss_hermite(n: int):
    """Gauss-Hermite nodes and weights for the weight ``exp(-t^2)``.

    Nodes start from the eigenvalues of the symmetric tridiagonal Jacobi
    matrix of the Hermite recurrence (Golub-Welsch) and are polished by
    Newton steps; weights are Christoffel numbers from the orthonormal
    recurrence. The returned arrays are read-only and cached.
    """
    n = int(n)
    if not 1 <= n <= 200:
        raise InvalidInputError(f"node count must be in [1, 200], got {n}")
    return _gauss_hermite_cached(n)


def _mvn_factor(cov):
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1]:
        raise InvalidInputError("covariance must be square")
    cov = 0.5 * (cov + cov.T)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        if vals.min() < -1e-10:
            raise InvalidInputError(
                f"covariance has a negative eigenvalue {vals.min():.3g}"
            ) from None
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def mvn_sample(mean, cov, n: int, seed=None, rng: np.random.Generator | None = None):
    """Draw ``n`` rows from a multivariate normal distribution.

    Uses a Cholesky factor, falling back to a symmetric eigendecomposition
    for positive semi-definite matrices of deficient rank.

    Parameters
    ----------
    mean : array_like, shape (d,)
    cov : array_like, shape (d, d)
    n : int
    seed : int or sequence of int, optional
        Used when ``rng`` is not supplied.
    rng : numpy.random.Generator, optional
    """
    mean = np.asarray(mean, dtype=float)
    factor = _mvn_factor(cov)
    if factor.shape[0] != mean.size:
        raise InvalidInputError("mean and covariance dimensions differ")
    if rng is None:
        rng = np.random.default_rng(seed)
    std = rng.standard_normal((n, mean.size))
    return mean + std @ factor.T


def replication_rng(master_seed: int, replication: int, stream: int = 0) -> np.random.Generator:
    """Independent generator keyed on (master seed, replication, stream).

    The key is fed to :class:`numpy.random.SeedSequence`, so streams do not
    depend on execution order or worker assignment.
    """
    seq = np.random.SeedSequence([int(master_seed), int(replication), int(stream)])
    return np.random.Generator(np.random.Philox(seq))
