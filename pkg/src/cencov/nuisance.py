"""Nuisance laws: the Gaussian model for (X, C) given Z and logistic observation models.

A :class:`NuisanceBundle` carries everything an estimating function needs
beyond theta: the law of ``X | Z``, the censoring law, logistic
coefficients for ``Pr(observed | y, z)``, and optional frozen injected
probabilities. Fitting routines return :class:`NuisanceBlock` objects
holding per-record scores and the mean score Jacobian so the variance can
be corrected for estimation of the nuisance parameters.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .closed_forms import (
    GaussianConditional,
    clip_probability,
    prob_observed_xz,
    prob_observed_yz,
)
from .errors import ConfigurationError, ConvergenceError, InvalidInputError
from .model import CensoredData, MeanSpec
from .numerics import (
    SolverConfig,
    log_normal_upper_tail,
    numeric_jacobian,
    solve_estimating_equation,
)

__all__ = [
    "NuisanceBundle",
    "NuisanceBlock",
    "MisspecInjector",
    "fit_alpha",
    "fit_logistic_kappa",
    "alpha_loglik",
    "alpha_to_laws",
    "dependent_censoring_law",
]

_LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class NuisanceBundle:
    """Nuisance laws used by the estimating functions.

    Attributes
    ----------
    x_given_z : GaussianConditional, optional
        Law of ``X | Z``.
    c_dist : GaussianConditional, optional
        Law of ``C | Z`` (independent censoring) or ``C | X, Z``
        (dependent censoring, ``given_slope`` multiplies ``x``).
    kappa : ndarray, optional
        Logistic coefficients over ``(1, y, z)`` for the probability of
        observing ``X`` given ``(y, z)``. In the missing-covariate problem
        with independent missingness the ``y`` coefficient is 0 and the same
        block gives ``Pr(R = 1 | z)``.
    xi : ndarray, optional
        Logistic coefficients over ``(1, x, z)`` for dependent missingness.
        Known-value mode only.
    outcome_theta : ndarray, optional
        Outcome parameters used to evaluate ``Pr(observed | y, z)`` from the
        Gaussian laws.
    injected_pi : ndarray, optional
        Frozen per-record probabilities replacing the model-based weight.
    inject_psi : bool
        Also use ``injected_pi`` inside the efficient augmentation vector,
        where it acts as a probability that does not vary with ``x``.
    cov_xc_given_z : float, optional
        Declared conditional covariance of ``(X, C)`` given ``Z``.
    provenance : dict
        Per block: ``"known"``, ``"estimated"`` or ``"misspecified:<kind>"``.
    """

    x_given_z: Optional[GaussianConditional] = None
    c_dist: Optional[GaussianConditional] = None
    kappa: Optional[np.ndarray] = None
    xi: Optional[np.ndarray] = None
    outcome_theta: Optional[np.ndarray] = None
    injected_pi: Optional[np.ndarray] = None
    inject_psi: bool = False
    cov_xc_given_z: Optional[float] = None
    provenance: dict = field(default_factory=dict)

    def require_x(self) -> GaussianConditional:
        if self.x_given_z is None:
            raise ConfigurationError("nuisance block 'x_given_z' is required but missing")
        return self.x_given_z

    def require_c(self) -> GaussianConditional:
        if self.c_dist is None:
            raise ConfigurationError("nuisance block 'c_dist' is required but missing")
        return self.c_dist

    def require_kappa(self) -> np.ndarray:
        if self.kappa is None:
            raise ConfigurationError("nuisance block 'kappa' is required but missing")
        return np.asarray(self.kappa, dtype=float)

    def require_xi(self) -> np.ndarray:
        if self.xi is None:
            raise ConfigurationError("nuisance block 'xi' is required but missing")
        return np.asarray(self.xi, dtype=float)

    def check_dependence(self, problem: str, dependence: str):
        if problem == "cens" and dependence == "dep" and self.c_dist is not None:
            if self.c_dist.given_slope == 0.0 and self.cov_xc_given_z is None:
                raise ConfigurationError(
                    "dependent censoring needs c_dist conditioned on x with a declared "
                    "conditional covariance"
                )

    def pi_x_on_nodes(self, y, z, problem: str, dependence: str, for_psi: bool = False) -> Callable:
        """Return ``f(xs) = Pr(observed | X = xs, z)`` for an ``(n, K)`` node grid.

        With ``for_psi`` set and ``inject_psi`` enabled the injected draws are
        returned instead of the model probabilities.
        """
        z = np.asarray(z, dtype=float)
        if for_psi and self.inject_psi and self.injected_pi is not None:
            pi = np.asarray(self.injected_pi, dtype=float)
            return lambda xs: np.broadcast_to(pi[:, None], np.shape(xs))
        if problem == "cens":
            c = self.require_c()
            return lambda xs: prob_observed_xz(xs, z, c, dependence)
        if dependence == "ind":
            kap = self.require_kappa()
            lin = kap[0] + z @ kap[2:]
            return lambda xs: np.broadcast_to(expit(lin)[:, None], np.shape(xs))
        xi = self.require_xi()
        lin = xi[0] + z @ xi[2:]
        return lambda xs: expit(lin[:, None] + xi[1] * xs)

    def pi_x(self, v, y, z, problem: str, dependence: str):
        """Model-based observation probability at the observed covariate value ``v``."""
        v = np.asarray(v, dtype=float)
        return clip_probability(self.pi_x_on_nodes(y, z, problem, dependence)(v[:, None])[:, 0])

    def pi_yz(self, y, z, problem: str, dependence: str, spec: MeanSpec, source: str = "analytic",
              theta=None, nodes: int = 60):
        """Observation probability given ``(y, z)`` from the chosen source."""
        z = np.asarray(z, dtype=float)
        y = np.asarray(y, dtype=float)
        if source == "logistic":
            kap = self.require_kappa()
            return clip_probability(expit(kap[0] + kap[1] * y + z @ kap[2:]))
        if source != "analytic":
            raise ConfigurationError(f"unknown probability source {source!r}")
        th = self.outcome_theta if self.outcome_theta is not None else theta
        if th is None:
            raise ConfigurationError("nuisance block 'outcome_theta' is required for analytic pi(y, z)")
        return prob_observed_yz(y, z, th, self.require_x(), spec=spec, nodes=nodes,
                                pi_fn=self.pi_x_on_nodes(y, z, problem, dependence))

    def x_law_for_likelihood(self, w, z, dependence: str):
        """Law of ``X`` used in the censored likelihood as a ``(mean, sd)`` pair.

        Independent censoring uses ``X | Z``; dependent censoring uses
        ``X | C = w, Z`` implied by ``X | Z`` and ``C | X, Z``.
        """
        xl = self.require_x()
        mu_x = xl.mean(z)
        n = mu_x.size
        if dependence == "ind":
            return mu_x, np.full(n, xl.sd)
        c = self.require_c()
        k, tau = c.given_slope, c.sd
        var_x = xl.sd**2
        var_c = tau**2 + k**2 * var_x
        mu_c = c.mean(z, given=mu_x)
        mean = mu_x + k * var_x / var_c * (np.asarray(w, dtype=float) - mu_c)
        sd = np.sqrt(var_x - (k * var_x) ** 2 / var_c)
        return mean, np.full(n, sd)

    def with_updates(self, **kw) -> "NuisanceBundle":
        prov = dict(self.provenance)
        prov.update(kw.pop("provenance", {}))
        return replace(self, provenance=prov, **kw)


@dataclass
class NuisanceBlock:
    """An estimated nuisance parameter block prepared for variance stacking.

    Attributes
    ----------
    name : str
    params : ndarray, shape (q,)
    scores : ndarray, shape (n, q)
        Per-record estimating function of the nuisance parameters.
    jacobian : ndarray, shape (q, q)
        Mean derivative of ``scores`` with respect to ``params``.
    rebuild : callable
        ``rebuild(bundle, params) -> bundle`` placing new parameter values in
        a bundle, used for numerical derivatives in the nuisance direction.
    converged : bool
    iterations : int
    """

    name: str
    params: np.ndarray
    scores: np.ndarray
    jacobian: np.ndarray
    rebuild: Callable
    converged: bool = True
    iterations: int = 0
    dropped: tuple = ()

    @property
    def info(self) -> np.ndarray:
        """Observed information, ``-n`` times the mean score Jacobian."""
        return -self.scores.shape[0] * self.jacobian


def dependent_censoring_law(x_law: GaussianConditional, c_marginal: GaussianConditional,
                            cov_xc_given_z: float) -> GaussianConditional:
    """Law of ``C | X, Z`` from ``X | Z``, ``C | Z`` and their conditional covariance."""
    if cov_xc_given_z == 0.0:
        return c_marginal
    k = cov_xc_given_z / x_law.sd**2
    var = c_marginal.sd**2 - cov_xc_given_z**2 / x_law.sd**2
    if not var > 0:
        raise InvalidInputError("conditional covariance too large for the marginal variances")
    if x_law.columns != c_marginal.columns and x_law.slopes and c_marginal.slopes:
        raise InvalidInputError("x and c laws must condition on the same z columns")
    xs = np.asarray(x_law.slopes) if x_law.slopes else np.zeros(len(c_marginal.slopes))
    cs = np.asarray(c_marginal.slopes) if c_marginal.slopes else np.zeros(len(x_law.slopes))
    cols = c_marginal.columns if c_marginal.slopes else x_law.columns
    return GaussianConditional(c_marginal.intercept - k * x_law.intercept, tuple(cs - k * xs),
                               float(np.sqrt(var)), cols, k)


def _design(z, columns):
    z = np.asarray(z, dtype=float)
    cols = list(range(z.shape[1])) if columns is None else list(columns)
    return np.column_stack([np.ones(z.shape[0]), z[:, cols]])


def alpha_to_laws(alpha, x_columns, c_columns):
    """Split ``(gamma..., sd_x, eta..., sd_c)`` into the two marginal laws given Z."""
    alpha = np.asarray(alpha, dtype=float)
    qx = 1 + len(x_columns)
    gx = GaussianConditional(alpha[0], tuple(alpha[1:qx]), alpha[qx], tuple(x_columns))
    rest = alpha[qx + 1:]
    qc = 1 + len(c_columns)
    gc = GaussianConditional(rest[0], tuple(rest[1:qc]), rest[qc], tuple(c_columns))
    return gx, gc


def _pair_terms(w, mo, so, mq, sq, s):
    """Log-likelihood and gradient for ``O = w`` observed and ``Q > w``.

    ``(O, Q)`` is bivariate normal given Z with means ``mo, mq``, sds
    ``so, sq`` and covariance ``s``. Returns ``(ll, d/dmo, d/dso, d/dmq, d/dsq)``.
    """
    k = s / so**2
    tau2 = sq**2 - s**2 / so**2
    tau = np.sqrt(np.where(tau2 > 0, tau2, np.nan))
    r = w - mo
    u = w - mq - k * r
    t = u / tau
    log_tail = log_normal_upper_tail(t)
    lam = np.exp(-0.5 * t**2 - 0.5 * _LOG_2PI - log_tail)
    ll = -np.log(so) - 0.5 * (r / so) ** 2 - 0.5 * _LOG_2PI + log_tail
    dt_dmo = k / tau
    dt_dmq = -1.0 / tau
    dtau_dso = (s**2 / so**3) / tau
    dt_dso = (2 * s * r / so**3) / tau - u / tau**2 * dtau_dso
    dt_dsq = -u / tau**2 * (sq / tau)
    g_mo = r / so**2 - lam * dt_dmo
    g_so = -1.0 / so + r**2 / so**3 - lam * dt_dso
    g_mq = -lam * dt_dmq
    g_sq = -lam * dt_dsq
    return ll, g_mo, g_so, g_mq, g_sq


def _alpha_parts(alpha, data: CensoredData, x_columns, c_columns, cov_xc):
    gx, gc = alpha_to_laws(alpha, x_columns, c_columns)
    dx = _design(data.z, x_columns)
    dc = _design(data.z, c_columns)
    mx, mc = dx @ np.r_[gx.intercept, gx.slopes], dc @ np.r_[gc.intercept, gc.slopes]
    sx, sc = gx.sd, gc.sd
    w = data.w
    obs = data.delta == 1
    ll = np.empty(data.n)
    g = np.empty((data.n, 4))  # d/d (mx, sx, mc, sc)
    l1, a, b, c, d = _pair_terms(w[obs], mx[obs], sx, mc[obs], sc, cov_xc)
    ll[obs] = l1
    g[obs] = np.column_stack([a, np.broadcast_to(b, a.shape), c, np.broadcast_to(d, a.shape)])
    cen = ~obs
    l0, a, b, c, d = _pair_terms(w[cen], mc[cen], sc, mx[cen], sx, cov_xc)
    ll[cen] = l0
    g[cen] = np.column_stack([c, np.broadcast_to(d, a.shape), a, np.broadcast_to(b, a.shape)])
    scores = np.column_stack([dx * g[:, [0]], g[:, [1]], dc * g[:, [2]], g[:, [3]]])
    return ll, scores


def alpha_loglik(alpha, data: CensoredData, x_columns=None, c_columns=None, cov_xc_given_z=0.0):
    """Per-record log-likelihood of ``(W, Delta)`` given Z under the bivariate normal model."""
    xc = tuple(range(data.k)) if x_columns is None else tuple(x_columns)
    cc = tuple(range(data.k)) if c_columns is None else tuple(c_columns)
    return _alpha_parts(alpha, data, xc, cc, cov_xc_given_z)[0]


def _ols(design, target):
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    resid = target - design @ coef
    return coef, float(np.sqrt(np.mean(resid**2)))


def fit_alpha(data: CensoredData, dependence: str = "ind", known_cov_xc_given_z: float = 0.0,
              x_columns=None, c_columns=None, cfg: SolverConfig | None = None):
    """Maximum likelihood for the normal laws of ``X | Z`` and ``C | Z``.

    Each record contributes ``log f_X(w) + log Pr(C > w | X = w)`` when
    ``delta = 1`` and ``log f_C(w) + log Pr(X > w | C = w)`` otherwise.
    Under independent censoring the conditional covariance is 0; under
    dependent censoring it must be supplied.

    Parameters
    ----------
    data : CensoredData
    dependence : {"ind", "dep"}
    known_cov_xc_given_z : float
        Conditional covariance of ``(X, C)`` given Z; ignored for ``ind``.
    x_columns, c_columns : sequence of int, optional
        Columns of ``z`` in each linear mean; all columns by default.

    Returns
    -------
    alpha_hat : ndarray
        ``(gamma_0, gamma..., sd_x, eta_0, eta..., sd_c)``.
    block : NuisanceBlock
        Per-record scores, mean Jacobian and a rebuild function.
    info : ndarray
        Observed information matrix.
    """
    if dependence not in ("ind", "dep"):
        raise InvalidInputError(f"unknown dependence {dependence!r}")
    cov = 0.0 if dependence == "ind" else float(known_cov_xc_given_z)
    xc = tuple(range(data.k)) if x_columns is None else tuple(x_columns)
    cc = tuple(range(data.k)) if c_columns is None else tuple(c_columns)
    obs = data.delta == 1
    if obs.sum() <= len(xc) + 1 or (~obs).sum() <= len(cc) + 1:
        raise InvalidInputError("too few observed or censored records to fit the censoring model")
    bx, sx = _ols(_design(data.z[obs], xc), data.w[obs])
    bc, sc = _ols(_design(data.z[~obs], cc), data.w[~obs])
    sx = max(sx, 1.2 * np.sqrt(abs(cov)) + 1e-3)
    sc = max(sc, 1.2 * np.sqrt(abs(cov)) + 1e-3)
    start = np.r_[bx, sx, bc, sc]
    qx = len(bx)
    positive = (qx, qx + 1 + len(bc))

    def mean_score(a):
        return _alpha_parts(a, data, xc, cc, cov)[1].mean(0)

    try:
        res = solve_estimating_equation(mean_score, start, cfg or SolverConfig(tol=1e-9),
                                        positive=positive, lower_bound=1e-6)
    except ConvergenceError as err:
        err.stage = "fit_alpha"
        raise
    alpha = res.x
    if min(alpha[list(positive)]) < 1e-6:
        raise ConvergenceError("fitted standard deviation is at the boundary", alpha, res.residual,
                               res.iterations, "fit_alpha")
    scores = _alpha_parts(alpha, data, xc, cc, cov)[1]
    jac = numeric_jacobian(mean_score, alpha, 1e-5 * (1 + np.abs(alpha)))

    def rebuild(bundle: NuisanceBundle, a):
        gx, gc = alpha_to_laws(a, xc, cc)
        cl = dependent_censoring_law(gx, gc, cov) if dependence == "dep" else gc
        return bundle.with_updates(x_given_z=gx, c_dist=cl)

    block = NuisanceBlock("alpha", alpha, scores, jac, rebuild, res.converged, res.iterations)
    return alpha, block, block.info


def _independent_columns(design, tol=1e-10):
    """Indices of a maximal set of linearly independent, non-constant columns (intercept kept)."""
    keep = [0]
    for j in range(1, design.shape[1]):
        col = design[:, j]
        if np.ptp(col) <= tol * max(1.0, np.abs(col).max()):
            continue
        trial = design[:, keep + [j]]
        if np.linalg.matrix_rank(trial, tol=1e-8 * np.sqrt(design.shape[0])) == len(keep) + 1:
            keep.append(j)
    return keep


def fit_logistic_kappa(indicator, y, z, include_y: bool = True, max_iter: int = 50,
                       tol: float = 1e-10):
    """Logistic regression of an observation indicator on ``(1, y, z)`` by Newton-Raphson.

    Constant or collinear columns are dropped with a warning and their
    coefficients reported as 0. With ``include_y=False`` the ``y``
    coefficient is fixed at 0.

    Returns
    -------
    kappa_hat : ndarray
        Coefficients over ``(1, y, z)``.
    block : NuisanceBlock
        Scores and Jacobian over the free coefficients only.
    info : ndarray
        Observed information over the free coefficients.

    Raises
    ------
    InvalidInputError
        If only one indicator class is present or the classes are perfectly
        separated.
    """
    d = np.asarray(indicator, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if d.min() == d.max():
        raise InvalidInputError("indicator has a single class; logistic fit impossible")
    full = np.column_stack([np.ones(d.size), y, z])
    candidates = [0] + ([1] if include_y else []) + list(range(2, full.shape[1]))
    keep_local = _independent_columns(full[:, candidates])
    active = [candidates[j] for j in keep_local]
    dropped = tuple(j for j in range(full.shape[1]) if j not in active and (include_y or j != 1))
    if dropped:
        warnings.warn(f"dropped constant or collinear columns {dropped} from logistic fit",
                      RuntimeWarning)
    X = full[:, active]
    beta = np.zeros(len(active))
    beta[0] = np.log(d.mean() / (1 - d.mean()))
    converged = False
    for it in range(1, max_iter + 1):
        p = expit(X @ beta)
        grad = X.T @ (d - p)
        hess = (X * (p * (1 - p))[:, None]).T @ X
        step = np.linalg.solve(hess + 1e-12 * np.eye(len(beta)), grad)
        beta = beta + step
        if np.max(np.abs(step)) < tol * (1 + np.max(np.abs(beta))):
            converged = True
            break
        if np.max(np.abs(X @ beta)) > 40:
            raise InvalidInputError(
                "logistic fit diverges: the indicator is (quasi-)perfectly separated by (y, z)"
            )
    if not converged:
        raise ConvergenceError("logistic fit did not converge", beta, float(np.max(np.abs(grad))),
                               max_iter, "fit_logistic_kappa")
    p = expit(X @ beta)
    scores = X * (d - p)[:, None]
    jac = -(X * (p * (1 - p))[:, None]).T @ X / d.size
    kappa = np.zeros(full.shape[1])
    kappa[active] = beta

    def rebuild(bundle: NuisanceBundle, b):
        k = np.zeros(full.shape[1])
        k[active] = b
        return bundle.with_updates(kappa=k)

    block = NuisanceBlock("kappa", beta, scores, jac, rebuild, converged, it, dropped)
    return kappa, block, block.info


@dataclass(frozen=True)
class MisspecInjector:
    """Deliberate misspecification of a nuisance component for simulation studies.

    Parameters
    ----------
    kind : {"uniform_pi", "wrong_x_dist", "pi_yz_in_ipw"}
        ``uniform_pi`` replaces the observation probabilities used as
        weights by frozen Uniform(lo, hi) draws; ``wrong_x_dist`` replaces the
        law of ``X | Z`` by ``N(mean, sd^2)``; ``pi_yz_in_ipw`` weights IPW by
        the probability given ``(y, z)`` instead of ``(x, z)``.
    target : {"weights", "psi", "both"}
        For ``uniform_pi``: whether the draws replace the probabilities in
        the weights, inside the efficient augmentation vector, or both.
    """

    kind: str
    target: str = "weights"
    lo: float = 0.1
    hi: float = 0.9
    mean: float = -2.0
    sd: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform_pi", "wrong_x_dist", "pi_yz_in_ipw"):
            raise InvalidInputError(f"unknown injector {self.kind!r}")
        if self.target not in ("weights", "psi", "both"):
            raise InvalidInputError(f"unknown injection target {self.target!r}")
        if not 0 < self.lo < self.hi < 1:
            raise InvalidInputError("uniform bounds must satisfy 0 < lo < hi < 1")

    def apply(self, bundle: NuisanceBundle, n: int, rng: np.random.Generator | None = None):
        """Return the modified bundle; the uniform draw happens here, once per record."""
        if self.kind == "uniform_pi":
            if rng is None:
                raise InvalidInputError("uniform_pi needs a random generator")
            pi = rng.uniform(self.lo, self.hi, size=n)
            return bundle.with_updates(injected_pi=pi, inject_psi=self.target in ("psi", "both"),
                                       provenance={"pi": f"misspecified:uniform_pi:{self.target}"})
        if self.kind == "wrong_x_dist":
            return bundle.with_updates(x_given_z=GaussianConditional(self.mean, (), self.sd),
                                       provenance={"x_given_z": "misspecified:wrong_x_dist"})
        return bundle.with_updates(provenance={"pi": "misspecified:pi_yz_in_ipw"})
