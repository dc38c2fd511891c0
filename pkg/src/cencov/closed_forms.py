"""Gaussian closed forms for the conditional law of X given (Y, Z).

With ``X | Z ~ N(mu_x, sd_x^2)`` and a normal outcome whose mean is affine
in ``x``, the product ``f(y | x, z) f(x | z)`` is a scaled normal density in
``x``. Completing the square gives its centre ``mu_star``, scale
``sd_star`` and total mass ``D``; everything else follows:

* ``psi_closed``: minus the conditional expectation of the full-data score,
* ``censored_marginal_loglik``: log of the mass above a censoring point,
* observation probabilities and weighted conditional expectations by
  Gauss-Hermite quadrature centred on ``(mu_star, sd_star)``.

All functions accept scalars or length-n arrays and broadcast over records.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateDenominatorError, InvalidInputError
from .model import MeanSpec, as_theta_vector, linear_split, score_polynomial
from .numerics import gauss_hermite, log_normal_upper_tail, normal_upper_tail

__all__ = [
    "GaussianConditional",
    "ProductDecomposition",
    "ClampCounter",
    "clip_probability",
    "normal_product_decompose",
    "psi_closed",
    "censored_marginal_loglik",
    "truncated_score_expectation",
    "prob_observed_xz",
    "prob_observed_yz",
    "conditional_expectation_x",
    "weighted_moments",
    "psi_effective_from_pi",
    "psi_effective",
    "PI_FLOOR",
    "LOG_FLOOR",
]

PI_FLOOR = 1e-12
LOG_FLOOR = -745.0
DEFAULT_NODES = 60


@dataclass(frozen=True)
class GaussianConditional:
    """Normal conditional law with a linear mean.

    ``mean = intercept + slopes . z[:, columns] + given_slope * given``

    Parameters
    ----------
    intercept : float
    slopes : tuple of float
        Coefficients on the selected ``z`` columns.
    sd : float
        Conditional standard deviation.
    columns : tuple of int, optional
        Columns of ``z`` the slopes multiply; all columns when omitted.
    given_slope : float
        Coefficient on the other partially observed variable, e.g. ``x`` in
        a law for ``C | X, Z``.
    """

    intercept: float = 0.0
    slopes: tuple = ()
    sd: float = 1.0
    columns: Optional[tuple] = None
    given_slope: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "slopes", tuple(float(s) for s in np.atleast_1d(self.slopes)))
        if self.columns is not None:
            object.__setattr__(self, "columns", tuple(int(c) for c in self.columns))
            if len(self.columns) != len(self.slopes):
                raise InvalidInputError("columns and slopes have different lengths")
        if not self.sd > 0:
            raise InvalidInputError(f"sd must be positive, got {self.sd}")

    def mean(self, z, given=None):
        """Conditional mean for each row of ``z``; ``given`` broadcasts."""
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            z = z[None, :]
        out = np.full(z.shape[0], float(self.intercept))
        if self.slopes:
            cols = self.columns if self.columns is not None else tuple(range(z.shape[1]))
            if len(cols) != len(self.slopes) or (cols and max(cols) >= z.shape[1]):
                raise InvalidInputError(
                    f"{len(self.slopes)} slopes do not match z of width {z.shape[1]}"
                )
            out = out + z[:, list(cols)] @ np.asarray(self.slopes)
        if self.given_slope != 0.0:
            if given is None:
                raise InvalidInputError("this law conditions on a second variable; pass given")
            g = np.asarray(given, dtype=float)
            out = out.reshape(out.shape + (1,) * (g.ndim - 1)) + self.given_slope * g
        return out

    def to_dict(self):
        return {"intercept": self.intercept, "slopes": list(self.slopes), "sd": self.sd,
                "columns": None if self.columns is None else list(self.columns),
                "given_slope": self.given_slope}

    @classmethod
    def from_dict(cls, d):
        cols = d.get("columns")
        return cls(float(d.get("intercept", 0.0)), tuple(d.get("slopes", ())), float(d["sd"]),
                   None if cols is None else tuple(cols), float(d.get("given_slope", 0.0)))


@dataclass(frozen=True)
class ProductDecomposition:
    """Result of completing the square in ``f(y | x, z) f(x | z)``.

    The product equals ``exp(a x^2 + b x + c) / (2 pi sigma sd_x)``, which is
    ``D`` times the ``N(mu_star, sd_star^2)`` density.
    """

    a_star: np.ndarray
    b_star: np.ndarray
    c_star: np.ndarray
    mu_star: np.ndarray
    sd_star: np.ndarray
    log_D: np.ndarray
    e_star: np.ndarray


@dataclass
class ClampCounter:
    """Counts probabilities pushed into ``[PI_FLOOR, 1 - PI_FLOOR]``."""

    count: int = 0

    def add(self, k: int):
        self.count += int(k)


def clip_probability(p, counter: Optional[ClampCounter] = None):
    """Clamp probabilities away from 0 and 1, counting the clamped entries."""
    p = np.asarray(p, dtype=float)
    lo, hi = PI_FLOOR, 1.0 - PI_FLOOR
    if counter is not None:
        counter.add(np.count_nonzero((p < lo) | (p > hi)))
    return np.clip(p, lo, hi)


def _x_params(x_dist, z):
    if isinstance(x_dist, GaussianConditional):
        if x_dist.given_slope != 0.0:
            raise InvalidInputError("x law must not condition on another partially observed variable")
        return x_dist.mean(z), np.full(np.atleast_2d(z).shape[0], x_dist.sd)
    mu, sd = x_dist
    n = np.atleast_2d(np.asarray(z, dtype=float)).shape[0] if np.asarray(z).ndim > 1 else None
    mu = np.asarray(mu, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if n is not None:
        mu = np.broadcast_to(mu, (n,))
        sd = np.broadcast_to(sd, (n,))
    return np.atleast_1d(mu), np.atleast_1d(sd)


def _squeeze(arr, single):
    return arr[0] if single else arr


def _is_single(y, z):
    return np.ndim(y) == 0 and np.asarray(z).ndim == 1


def normal_product_decompose(theta, y, z, x_dist, spec: MeanSpec) -> ProductDecomposition:
    """Complete the square in ``f(y | x, z; theta) f(x | z)`` as a function of ``x``.

    Parameters
    ----------
    theta : Theta or array_like
    y : float or ndarray
    z : array_like, shape (k,) or (n, k)
    x_dist : GaussianConditional or (mean, sd)
        Law of ``X`` given the covariates; a ``(mean, sd)`` pair may hold
        per-record arrays.
    spec : MeanSpec

    Returns
    -------
    ProductDecomposition
        Fields are arrays of length n (scalars for a single record).
    """
    th = as_theta_vector(theta)
    single = _is_single(y, z)
    offset, slope, _, _ = linear_split(th, z, spec)
    mu_x, sd_x = _x_params(x_dist, z)
    sigma = th[-1]
    s2, v = sigma**2, sd_x**2
    # residual = e - slope * x, with e the part free of x
    e = np.asarray(y, dtype=float) - offset
    a = -slope**2 / (2 * s2) - 1.0 / (2 * v)
    b = e * slope / s2 + mu_x / v
    c = -(e**2) / (2 * s2) - mu_x**2 / (2 * v)
    mu_star = -b / (2 * a)
    var_star = v * s2 / (s2 + slope**2 * v)
    log_d = -0.5 * np.log(2 * np.pi * (s2 + slope**2 * v)) + c - b**2 / (4 * a)
    fields = [np.broadcast_to(f, np.shape(mu_star)) for f in
              (a, b, c, mu_star, np.sqrt(var_star), log_d, e)]
    return ProductDecomposition(*(_squeeze(np.asarray(f), single) for f in fields))


def psi_closed(theta, y, z, x_dist, spec: MeanSpec):
    """Minus the conditional expectation of the full-data score given ``(y, z)``.

    Uses ``E[X] = mu_star`` and ``E[X^2] = sd_star^2 + mu_star^2`` under the
    normal law obtained from :func:`normal_product_decompose`.
    """
    single = _is_single(y, z)
    pd = normal_product_decompose(theta, np.atleast_1d(y), np.atleast_2d(z) if single else z,
                                  x_dist, spec)
    coef = score_polynomial(theta, np.atleast_1d(y), np.atleast_2d(z) if single else z, spec)
    m1 = np.atleast_1d(pd.mu_star)
    m2 = np.atleast_1d(pd.sd_star) ** 2 + m1**2
    out = -(coef[..., 0] + coef[..., 1] * m1[:, None] + coef[..., 2] * m2[:, None])
    return _squeeze(out, single)


def censored_marginal_loglik(theta, y, w, z, x_dist, spec: MeanSpec):
    """``log`` of the integral of ``f(y | x, z) f(x | .)`` over ``x > w``.

    Returns ``log D + log(1 - Phi((w - mu_star) / sd_star))`` clamped below at -745.
    """
    pd = normal_product_decompose(theta, y, z, x_dist, spec)
    t = (np.asarray(w, dtype=float) - pd.mu_star) / pd.sd_star
    out = pd.log_D + log_normal_upper_tail(t)
    return np.maximum(out, LOG_FLOOR)


def _truncated_moments(mu, sd, w):
    """First two moments of ``N(mu, sd^2)`` restricted to ``(w, inf)``."""
    alpha = (np.asarray(w, dtype=float) - mu) / sd
    log_pdf = -0.5 * alpha**2 - 0.5 * np.log(2 * np.pi)
    lam = np.exp(log_pdf - log_normal_upper_tail(alpha))
    m1 = mu + sd * lam
    m2 = mu**2 + 2 * mu * sd * lam + sd**2 * (1.0 + alpha * lam)
    return m1, m2


def truncated_score_expectation(theta, y, w, z, x_dist, spec: MeanSpec):
    """Gradient in theta of :func:`censored_marginal_loglik`.

    Equal to the expectation of the full-data score under the conditional
    law of ``X`` given ``(y, z)`` truncated to ``X > w``. Pass ``w = -inf``
    for the untruncated expectation.

    Returns
    -------
    ndarray, shape (n, p)
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    z2 = np.atleast_2d(z) if np.asarray(z).ndim == 1 and y.size == 1 else z
    pd = normal_product_decompose(theta, y, z2, x_dist, spec)
    mu, sd = np.atleast_1d(pd.mu_star), np.atleast_1d(pd.sd_star)
    w = np.broadcast_to(np.asarray(w, dtype=float), mu.shape)
    unbounded = np.isneginf(w)
    m1, m2 = _truncated_moments(mu, sd, np.where(unbounded, mu, w))
    m1 = np.where(unbounded, mu, m1)
    m2 = np.where(unbounded, mu**2 + sd**2, m2)
    coef = score_polynomial(theta, y, z2, spec)
    return coef[..., 0] + coef[..., 1] * m1[:, None] + coef[..., 2] * m2[:, None]


def prob_observed_xz(x_or_w, z, c_dist: GaussianConditional, dependence: str = "ind",
                     counter: Optional[ClampCounter] = None):
    """Probability that a censoring time exceeds ``x``: ``1 - Phi((x - mu_C) / sd_C)``.

    ``c_dist`` is the law of ``C | Z`` (``ind``) or ``C | X, Z`` (``dep``,
    evaluated at ``X = x``). ``x`` may be ``(n,)`` or ``(n, K)``.
    Results are clamped to ``[1e-12, 1 - 1e-12]``.
    """
    single = _is_single(x_or_w, z)
    x = np.asarray(x_or_w, dtype=float)
    if dependence == "ind":
        mu = c_dist.mean(z)
        if x.ndim == 2:
            mu = mu[:, None]
    elif dependence == "dep":
        mu = c_dist.mean(z, given=x if x.ndim else np.atleast_1d(x))
    else:
        raise InvalidInputError(f"unknown dependence {dependence!r}")
    out = clip_probability(normal_upper_tail((x - mu) / c_dist.sd), counter)
    return _squeeze(np.atleast_1d(out), single)


def _posterior_nodes(theta, y, z, x_dist, spec, nodes):
    pd = normal_product_decompose(theta, y, z, x_dist, spec)
    t, wts = gauss_hermite(nodes)
    mu = np.atleast_1d(pd.mu_star)[:, None]
    sd = np.atleast_1d(pd.sd_star)[:, None]
    return mu + np.sqrt(2.0) * sd * t[None, :], wts / np.sqrt(np.pi)


def weighted_moments(weight_fn: Callable, theta, y, z, x_dist, spec: MeanSpec,
                     nodes: int = DEFAULT_NODES):
    """``E[g(X) X^r]`` for ``r = 0, 1, 2`` under the conditional law of ``X`` given ``(y, z)``.

    ``weight_fn`` maps an ``(n, K)`` array of nodes to ``g`` values of the
    same shape. Returns an array of shape ``(n, 3)``.
    """
    xs, wts = _posterior_nodes(theta, y, z, x_dist, spec, nodes)
    g = np.asarray(weight_fn(xs), dtype=float) * wts
    return np.stack([g.sum(1), (g * xs).sum(1), (g * xs**2).sum(1)], axis=1)


def prob_observed_yz(y, z, theta, x_dist, c_dist: GaussianConditional = None,
                     dependence: str = "ind", spec: MeanSpec = None,
                     nodes: int = DEFAULT_NODES, pi_fn: Callable = None,
                     counter: Optional[ClampCounter] = None):
    """Observation probability given the outcome: ``E[pi(X, z) | y, z]``.

    The ratio of integrals is evaluated by Gauss-Hermite quadrature on
    the normal conditional law of ``X`` given ``(y, z)``. Supply either
    ``c_dist`` (censoring) or a custom ``pi_fn(x_nodes)``.
    """
    spec = spec or MeanSpec.linear()
    single = _is_single(y, z)
    y1 = np.atleast_1d(y)
    z2 = np.atleast_2d(z) if single else np.asarray(z, dtype=float)
    if pi_fn is None:
        def pi_fn(xs):
            return prob_observed_xz(xs, z2, c_dist, dependence)
    m = weighted_moments(pi_fn, theta, y1, z2, x_dist, spec, nodes)
    return _squeeze(clip_probability(m[:, 0], counter), single)


def conditional_expectation_x(h: Callable, y, z, theta, x_dist, spec: MeanSpec,
                              nodes: int = DEFAULT_NODES, check: bool = True):
    """``E[h(X) | y, z]`` by recentred Gauss-Hermite quadrature.

    ``h`` receives an ``(n, K)`` node array and returns ``(n, K)`` or
    ``(n, K, m)`` values. When ``check`` is set the rule is repeated with
    twice the nodes and a ``RuntimeWarning`` is issued if the two disagree
    beyond ``1e-6`` relative.
    """
    single = _is_single(y, z)
    y1 = np.atleast_1d(y)
    z2 = np.atleast_2d(z) if single else np.asarray(z, dtype=float)

    def rule(k):
        xs, wts = _posterior_nodes(theta, y1, z2, x_dist, spec, k)
        vals = np.asarray(h(xs), dtype=float)
        if vals.ndim == 2:
            return vals @ wts
        return np.einsum("nkm,k->nm", vals, wts)

    out = rule(nodes)
    if check:
        fine = rule(min(2 * nodes, 200))
        scale = np.maximum(np.abs(fine), 1.0)
        if np.any(np.abs(out - fine) > 1e-6 * scale):
            warnings.warn("quadrature refinement disagrees beyond 1e-6", RuntimeWarning)
    return _squeeze(out, single)


def psi_effective_from_pi(kind: str, theta, y, z, x_dist, pi_fn: Callable, spec: MeanSpec,
                          nodes: int = DEFAULT_NODES):
    """Augmentation vector of the efficient form for a given observation model.

    Parameters
    ----------
    kind : {"ACC", "MACC", "AIPW"}
    pi_fn : callable
        Maps an ``(n, K)`` node array of ``x`` values to observation
        probabilities ``pi(x, z_i)``.

    Returns
    -------
    ndarray, shape (n, p)
        ACC: ``-E[pi S] / E[pi]``; MACC: ``E[(pi - 1) S] / E[1 - 1/pi]``;
        AIPW: ``E[(1 - 1/pi) S] / E[1 - 1/pi]``.
    """
    y = np.atleast_1d(y)
    z = np.atleast_2d(z) if np.asarray(z).ndim == 1 and y.size == 1 else z
    coef = score_polynomial(theta, y, z, spec)

    def expect_s(m):
        return (coef * m[:, None, :]).sum(-1)

    if kind == "ACC":
        m = weighted_moments(lambda xs: clip_probability(pi_fn(xs)), theta, y, z, x_dist, spec, nodes)
        return -expect_s(m) / m[:, :1]
    inv = weighted_moments(lambda xs: 1.0 - 1.0 / clip_probability(pi_fn(xs)),
                           theta, y, z, x_dist, spec, nodes)
    denom = inv[:, :1]
    if np.any(np.abs(denom) < 1e-10):
        raise DegenerateDenominatorError(
            "E[1 - 1/pi | y, z] is numerically zero; the observation model gives pi = 1"
        )
    if kind == "MACC":
        num = weighted_moments(lambda xs: clip_probability(pi_fn(xs)) - 1.0,
                               theta, y, z, x_dist, spec, nodes)
        return expect_s(num) / denom
    if kind == "AIPW":
        return expect_s(inv) / denom
    raise InvalidInputError(f"unknown augmentation kind {kind!r}")


def psi_effective(kind, y, z, theta, nuisance, dependence="ind", problem="cens",
                  spec: MeanSpec = None, nodes: int = DEFAULT_NODES):
    """Efficient-form augmentation vector using the laws held in a nuisance bundle.

    Parameters
    ----------
    kind : {"ACC", "MACC", "AIPW"}
    nuisance : NuisanceBundle
    dependence : {"ind", "dep"}
    problem : {"cens", "miss"}
    """
    spec = spec or MeanSpec.linear()
    z2 = np.atleast_2d(z) if np.asarray(z).ndim == 1 and np.ndim(y) == 0 else np.asarray(z, float)
    y1 = np.atleast_1d(y)
    pi_fn = nuisance.pi_x_on_nodes(y1, z2, problem, dependence, for_psi=True)
    out = psi_effective_from_pi(kind, theta, y1, z2, nuisance.require_x(), pi_fn, spec, nodes)
    return out[0] if np.ndim(y) == 0 and np.asarray(z).ndim == 1 else out
