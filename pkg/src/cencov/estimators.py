"""Estimating functions for regression with a censored or missing covariate.

Six families are available, each evaluated per record and stacked into an
``(n, p)`` matrix:

========  ==========================================================
CC        ``d S(y, v, z)``
IPW       ``d S(y, v, z) / pi_x(v, z)``
MLE       ``d S + (1 - d) E[S | y, z, X > w]`` (censored) or
          ``d S + (1 - d) E[S | y, z]`` (missing)
ACC       ``d S + (d - pi_yz(y, z)) Psi(y, z)``
MACC      ``d S + (1 - d / pi_x(v, z)) Psi(y, z)``
AIPW      ``d S / pi_x(v, z) + (1 - d / pi_x(v, z)) Psi(y, z)``
========  ==========================================================

Here ``d`` is the observation indicator, ``v`` the observed covariate
value and ``S`` the full-data score. The augmentation vector ``Psi`` is
either the closed Gaussian form or the efficient form for the estimator.
With a ``Lambda`` matrix the augmentation becomes ``Lambda Psi``, where
``Lambda`` projects the base estimating function onto the augmentation
space.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .closed_forms import (
    ClampCounter,
    clip_probability,
    psi_closed,
    psi_effective_from_pi,
    truncated_score_expectation,
)
from .errors import ConfigurationError, ConvergenceError, SingularMatrixError
from .model import (
    CensoredData,
    CensoredObservation,
    MeanSpec,
    MissingData,
    MissingObservation,
    as_theta_vector,
    linear_split,
    score_full,
)
from .nuisance import NuisanceBlock, NuisanceBundle, fit_alpha, fit_logistic_kappa
from .numerics import SolverConfig, numeric_jacobian, solve_estimating_equation

__all__ = [
    "KINDS",
    "EstimatorSpec",
    "FitResult",
    "NuisanceConfig",
    "PhiModel",
    "phi_contribution",
    "phi_matrix",
    "estimate_lambda",
    "complete_case_start",
    "fit_estimator",
    "estimate_nuisance",
]

logger = logging.getLogger(__name__)

KINDS = ("CC", "IPW", "MLE", "ACC", "MACC", "AIPW")


@dataclass(frozen=True)
class EstimatorSpec:
    """Which estimating function to use and how to build its ingredients.

    Parameters
    ----------
    kind : {"CC", "IPW", "MLE", "ACC", "MACC", "AIPW"}
    problem : {"cens", "miss"}
    dependence : {"ind", "dep"}
    psi_mode : {"effective", "closed"}
        Augmentation vector: the efficient form or minus the conditional
        expectation of the score.
    lambda_mode : {"none", "plain", "nuisance_adjusted"}
    probability_source : {"analytic", "logistic", "injected"}
        Where the observation probabilities come from.
    ipw_weight : {"pi_xz", "pi_yz"}
        IPW weight; ``pi_yz`` reproduces a known inconsistent variant.
    mean : MeanSpec
    """

    kind: str
    problem: str = "cens"
    dependence: str = "ind"
    psi_mode: str = "closed"
    lambda_mode: str = "none"
    probability_source: str = "analytic"
    ipw_weight: str = "pi_xz"
    mean: MeanSpec = field(default_factory=MeanSpec.linear)

    def __post_init__(self):
        checks = {
            "kind": KINDS, "problem": ("cens", "miss"), "dependence": ("ind", "dep"),
            "psi_mode": ("effective", "closed"),
            "lambda_mode": ("none", "plain", "nuisance_adjusted"),
            "probability_source": ("analytic", "logistic", "injected"),
            "ipw_weight": ("pi_xz", "pi_yz"),
        }
        for name, allowed in checks.items():
            if getattr(self, name) not in allowed:
                raise ConfigurationError(f"{name}={getattr(self, name)!r} not in {allowed}")
        if self.kind == "MLE" and self.problem == "miss" and self.dependence == "dep":
            raise ConfigurationError(
                "MLE is not available for dependent missingness: the integration domain "
                "for unobserved x is unknown"
            )
        if self.lambda_mode != "none" and self.kind not in ("ACC", "MACC", "AIPW"):
            raise ConfigurationError(f"lambda_mode applies only to augmented estimators, not {self.kind}")

    @property
    def augmented(self) -> bool:
        return self.kind in ("ACC", "MACC", "AIPW")

    @property
    def label(self) -> str:
        tag = self.kind
        if self.augmented:
            tag += "_L" if self.lambda_mode != "none" else f"_{self.psi_mode}"
        return tag

    def to_dict(self):
        return {"kind": self.kind, "problem": self.problem, "dependence": self.dependence,
                "psi_mode": self.psi_mode, "lambda_mode": self.lambda_mode,
                "probability_source": self.probability_source, "ipw_weight": self.ipw_weight,
                "mean": {"form": self.mean.form, "age_column": self.mean.age_column}}


@dataclass
class FitResult:
    """Fitted parameters with sandwich covariance and diagnostics.

    ``se_uncorrected`` is filled when nuisance parameters were estimated and
    holds the standard errors that ignore that estimation.
    """

    theta_hat: np.ndarray
    covariance: np.ndarray
    se: np.ndarray
    spec: EstimatorSpec
    converged: bool = True
    iterations: int = 0
    residual: float = 0.0
    lam: Optional[np.ndarray] = None
    pilot: Optional[np.ndarray] = None
    clamp_events: int = 0
    se_uncorrected: Optional[np.ndarray] = None
    condition_number: float = float("nan")
    nuisance_params: dict = field(default_factory=dict)

    def to_dict(self):
        def arr(a):
            return None if a is None else np.asarray(a).tolist()
        return {
            "theta_hat": arr(self.theta_hat), "se": arr(self.se),
            "covariance": arr(self.covariance), "se_uncorrected": arr(self.se_uncorrected),
            "lambda": arr(self.lam), "pilot": arr(self.pilot), "converged": bool(self.converged),
            "iterations": int(self.iterations), "residual": float(self.residual),
            "clamp_events": int(self.clamp_events),
            "condition_number": float(self.condition_number),
            "spec": self.spec.to_dict(),
            "nuisance_params": {k: arr(v) for k, v in self.nuisance_params.items()},
        }


class PhiModel:
    """Estimating function of one estimator bound to a dataset and nuisance bundle.

    Quantities that do not depend on theta (observation probabilities,
    likelihood laws for X) are computed once at construction.
    """

    def __init__(self, spec: EstimatorSpec, data, nuisance: NuisanceBundle,
                 lam: Optional[np.ndarray] = None, pilot_theta=None, nodes: int = 60):
        if data.problem != spec.problem:
            raise ConfigurationError(f"spec is for problem {spec.problem!r} but data is {data.problem!r}")
        nuisance = nuisance or NuisanceBundle()
        nuisance.check_dependence(spec.problem, spec.dependence)
        self.spec = spec
        self.data = data
        self.nuisance = nuisance
        self.lam = None if lam is None else np.asarray(lam, dtype=float)
        self.nodes = nodes
        self.clamps = ClampCounter()
        self.d = data.d.astype(float)
        self.v = data.v
        self.y = data.y
        self.z = data.z
        kind = spec.kind
        self.w_pi = None
        self.pi_yz = None
        if kind in ("IPW", "MACC", "AIPW"):
            self.w_pi = self._weight_probability(pilot_theta)
        if kind == "ACC":
            self.pi_yz = self._pi_yz(spec.probability_source, pilot_theta)
        if kind == "MLE":
            if spec.problem == "cens":
                self.x_law = nuisance.x_law_for_likelihood(data.w, data.z, spec.dependence)
                self.trunc = np.where(self.d == 1, -np.inf, data.w)
            else:
                xl = nuisance.require_x()
                self.x_law = (xl.mean(data.z), np.full(data.n, xl.sd))
                self.trunc = np.full(data.n, -np.inf)
            self.miss_idx = np.flatnonzero(self.d == 0)
        if spec.augmented:
            self.x_dist = nuisance.require_x()
            if spec.psi_mode == "effective":
                self.pi_nodes = nuisance.pi_x_on_nodes(
                    self.y, self.z, spec.problem, spec.dependence, for_psi=True)

    # probabilities -------------------------------------------------------
    def _pi_yz(self, source, theta):
        spec, nu = self.spec, self.nuisance
        if source == "injected":
            if nu.injected_pi is None:
                raise ConfigurationError("nuisance block 'injected_pi' is required but missing")
            return clip_probability(nu.injected_pi, self.clamps)
        p = nu.pi_yz(self.y, self.z, spec.problem, spec.dependence, spec.mean, source,
                     theta=theta, nodes=self.nodes)
        return clip_probability(p, self.clamps)

    def _weight_probability(self, theta):
        spec, nu = self.spec, self.nuisance
        if spec.probability_source == "injected":
            if nu.injected_pi is None:
                raise ConfigurationError("nuisance block 'injected_pi' is required but missing")
            return clip_probability(nu.injected_pi, self.clamps)
        if spec.kind == "IPW" and spec.ipw_weight == "pi_yz":
            return self._pi_yz("analytic" if spec.probability_source == "analytic" else "logistic", theta)
        p = nu.pi_x(self.v, self.y, self.z, spec.problem, spec.dependence)
        return clip_probability(p, self.clamps)

    # pieces ----------------------------------------------------------------
    def score_observed(self, theta):
        return score_full(theta, self.y, self.v, self.z, self.spec.mean) * self.d[:, None]

    def psi(self, theta):
        spec = self.spec
        if spec.psi_mode == "closed":
            return psi_closed(theta, self.y, self.z, self.x_dist, spec.mean)
        return psi_effective_from_pi(spec.kind, theta, self.y, self.z, self.x_dist,
                                     self.pi_nodes, spec.mean, self.nodes)

    def multiplier(self):
        if self.spec.kind == "ACC":
            return self.d - self.pi_yz
        return 1.0 - self.d / self.w_pi

    def base(self, theta):
        """CC part for ACC and MACC, IPW part for AIPW."""
        s = self.score_observed(theta)
        if self.spec.kind == "AIPW":
            return s / self.w_pi[:, None]
        return s

    def augmentation(self, theta):
        """Unscaled augmentation ``multiplier * Psi``."""
        return self.multiplier()[:, None] * self.psi(theta)

    def __call__(self, theta) -> np.ndarray:
        theta = as_theta_vector(theta)
        kind = self.spec.kind
        if kind == "CC":
            return self.score_observed(theta)
        if kind == "IPW":
            return self.score_observed(theta) / self.w_pi[:, None]
        if kind == "MLE":
            out = self.score_observed(theta)
            idx = self.miss_idx
            if idx.size:
                mu, sd = self.x_law
                out[idx] = truncated_score_expectation(
                    theta, self.y[idx], self.trunc[idx], self.z[idx], (mu[idx], sd[idx]), self.spec.mean)
            return out
        g = self.augmentation(theta)
        if self.lam is not None:
            g = g @ self.lam.T
        return self.base(theta) + g

    def mean(self, theta) -> np.ndarray:
        return self(theta).mean(axis=0)


def phi_matrix(spec: EstimatorSpec, data, theta, nuisance: NuisanceBundle, lam=None) -> np.ndarray:
    """Per-record estimating function values, shape ``(n, p)``."""
    return PhiModel(spec, data, nuisance, lam, pilot_theta=theta)(theta)


def phi_contribution(spec: EstimatorSpec, obs, theta, nuisance: NuisanceBundle, lam=None):
    """Estimating function for a single record.

    Parameters
    ----------
    obs : CensoredObservation or MissingObservation
    """
    if isinstance(obs, CensoredObservation):
        data = CensoredData.from_records([obs])
    elif isinstance(obs, MissingObservation):
        data = MissingData.from_records([obs])
    else:
        raise ConfigurationError(f"unsupported record type {type(obs).__name__}")
    return phi_matrix(spec, data, theta, nuisance, lam)[0]


def complete_case_start(data, mean: MeanSpec) -> np.ndarray:
    """Least-squares fit on complete records, with the maximum-likelihood sigma."""
    obs = data.d == 1
    if not obs.any():
        raise ConfigurationError("no complete records")
    k = data.k
    p = mean.n_params(k)
    probe = np.zeros(p)
    probe[-1] = 1.0
    _, _, d0, d1 = linear_split(probe, data.z[obs], mean)
    design = d0 + np.outer(data.v[obs], d1)
    beta, *_ = np.linalg.lstsq(design, data.y[obs], rcond=None)
    resid = data.y[obs] - design @ beta
    return np.r_[beta, np.sqrt(np.mean(resid**2))]


def _correction_terms(model_fn, theta, nuisance, blocks: Sequence[NuisanceBlock], what):
    """Influence-style correction ``-E[d what/d alpha] J^{-1} Phi_alpha`` summed over blocks."""
    total = 0.0
    for blk in blocks:
        def mean_part(a, blk=blk):
            return what(model_fn(blk.rebuild(nuisance, a)), theta).mean(0)

        da = numeric_jacobian(mean_part, blk.params, 1e-5 * (1 + np.abs(blk.params)))
        da = np.atleast_2d(da)
        upsilon = -np.linalg.solve(blk.jacobian, blk.scores.T).T
        total = total + upsilon @ da.T
    return total


def _inverse_moment(g):
    gg = g.T @ g / g.shape[0]
    p = gg.shape[0]
    scale = np.trace(gg) / p
    if not scale > 0:
        raise SingularMatrixError("augmentation outer-moment matrix is zero")
    if np.linalg.cond(gg) > 1e12:
        # collinear augmentation components: the projection onto span(g) is still unique
        logger.debug("augmentation outer-moment matrix is rank deficient; using a pseudo-inverse")
        return np.linalg.pinv(gg, rcond=1e-10, hermitian=True)
    return np.linalg.inv(gg)


def estimate_lambda(spec: EstimatorSpec, data, theta_pilot, nuisance: NuisanceBundle,
                    blocks: Sequence[NuisanceBlock] = (), nodes: int = 60) -> np.ndarray:
    """Projection matrix ``Lambda = -E[b g^T] E[g g^T]^{-1}`` at a pilot estimate.

    ``b`` is the base estimating function (CC for ACC and MACC, IPW for AIPW)
    and ``g`` the unscaled augmentation. In ``nuisance_adjusted`` mode both
    are first corrected for estimation of the nuisance blocks.
    """
    theta_pilot = as_theta_vector(theta_pilot)

    def build(bundle):
        return PhiModel(spec, data, bundle, None, theta_pilot, nodes)

    model = build(nuisance)
    b = model.base(theta_pilot)
    g = model.augmentation(theta_pilot)
    if spec.lambda_mode == "nuisance_adjusted":
        if not blocks:
            raise ConfigurationError("nuisance_adjusted Lambda needs estimated nuisance blocks")
        b = b + _correction_terms(build, theta_pilot, nuisance, blocks, lambda m, t: m.base(t))
        g = g + _correction_terms(build, theta_pilot, nuisance, blocks, lambda m, t: m.augmentation(t))
    cross = b.T @ g / g.shape[0]
    return -cross @ _inverse_moment(g)


@dataclass
class NuisanceConfig:
    """How to obtain the nuisance bundle for a fit.

    Parameters
    ----------
    base : NuisanceBundle
        Known components; estimated ones replace the matching fields.
    estimate_alpha : bool
        Fit the normal laws of ``X | Z`` and ``C | Z`` by maximum likelihood.
    estimate_kappa : bool
        Fit the logistic model for ``Pr(observed | y, z)``.
    known_cov_xc_given_z : float
    x_columns, c_columns : sequence of int, optional
    """

    base: NuisanceBundle = field(default_factory=NuisanceBundle)
    estimate_alpha: bool = False
    estimate_kappa: bool = False
    known_cov_xc_given_z: float = 0.0
    x_columns: Optional[tuple] = None
    c_columns: Optional[tuple] = None


def estimate_nuisance(spec: EstimatorSpec, data, cfg: NuisanceConfig):
    """Run the requested nuisance fits and return ``(bundle, blocks)``."""
    bundle = cfg.base
    blocks = []
    if cfg.estimate_alpha:
        if spec.problem != "cens":
            raise ConfigurationError("the (X, C) model is only defined for censored data")
        _, blk, _ = fit_alpha(data, spec.dependence, cfg.known_cov_xc_given_z,
                              cfg.x_columns, cfg.c_columns)
        bundle = blk.rebuild(bundle, blk.params).with_updates(
            cov_xc_given_z=cfg.known_cov_xc_given_z if spec.dependence == "dep" else 0.0,
            provenance={"x_given_z": "estimated", "c_dist": "estimated"})
        blocks.append(blk)
    if cfg.estimate_kappa:
        include_y = not (spec.problem == "miss" and spec.dependence == "ind")
        _, blk, _ = fit_logistic_kappa(data.d, data.y, data.z, include_y=include_y)
        bundle = blk.rebuild(bundle, blk.params).with_updates(provenance={"kappa": "estimated"})
        blocks.append(blk)
    return bundle, blocks


def _solve(model: PhiModel, start, solver, stage):
    try:
        return solve_estimating_equation(model.mean, start, solver)
    except ConvergenceError as err:
        err.stage = stage
        raise


def _relevant_blocks(spec: EstimatorSpec, blocks):
    """Nuisance blocks the estimating function actually depends on."""
    if spec.kind == "CC":
        return []
    return list(blocks)


def fit_estimator(spec: EstimatorSpec, data, nuisance: NuisanceBundle | None = None,
                  nuisance_config: NuisanceConfig | None = None,
                  blocks: Sequence[NuisanceBlock] = (), solver: SolverConfig | None = None,
                  nodes: int = 60, pilot: Optional[np.ndarray] = None) -> FitResult:
    """Fit one estimator: nuisance fits, pilot, Lambda, final solve, sandwich variance.

    Parameters
    ----------
    spec : EstimatorSpec
    data : CensoredData or MissingData
    nuisance : NuisanceBundle, optional
        Known nuisance laws. Ignored when ``nuisance_config`` is given.
    nuisance_config : NuisanceConfig, optional
        Requests nuisance estimation before fitting.
    blocks : sequence of NuisanceBlock
        Already estimated nuisance blocks belonging to ``nuisance``.
    pilot : ndarray, optional
        Pilot estimate for Lambda; computed when omitted.

    Returns
    -------
    FitResult
    """
    from .inference import sandwich_parts, sandwich_covariance

    solver = solver or SolverConfig()
    if nuisance_config is not None:
        nuisance, blocks = estimate_nuisance(spec, data, nuisance_config)
    nuisance = nuisance or NuisanceBundle()
    blocks = list(blocks)
    if spec.lambda_mode == "nuisance_adjusted" and not blocks:
        raise ConfigurationError("lambda_mode='nuisance_adjusted' requires estimated nuisance blocks")
    start = complete_case_start(data, spec.mean)
    cc_spec = EstimatorSpec("CC", spec.problem, spec.dependence, mean=spec.mean)
    lam = None
    if spec.lambda_mode != "none":
        if pilot is None:
            cc = _solve(PhiModel(cc_spec, data, nuisance), start, solver, "pilot CC")
            pilot = cc.x
            if spec.kind == "AIPW":
                ipw_spec = EstimatorSpec("IPW", spec.problem, spec.dependence,
                                         probability_source=spec.probability_source, mean=spec.mean)
                ipw = _solve(PhiModel(ipw_spec, data, nuisance, pilot_theta=pilot), pilot, solver,
                             "pilot IPW")
                pilot = ipw.x
        lam = estimate_lambda(spec, data, pilot, nuisance, blocks, nodes)
        start = pilot
    model = PhiModel(spec, data, nuisance, lam, pilot_theta=pilot if pilot is not None else start,
                     nodes=nodes)
    res = _solve(model, start, solver, f"final {spec.kind}")
    theta = res.x
    rel = _relevant_blocks(spec, blocks)

    def rebuild_model(bundle):
        return PhiModel(spec, data, bundle, lam, pilot_theta=pilot if pilot is not None else start,
                        nodes=nodes)

    parts = sandwich_parts(model, theta, rebuild_model if rel else None, nuisance, rel)
    cov = sandwich_covariance(parts, data.n, corrected=True)
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    se_unc = None
    if rel:
        cov_u = sandwich_covariance(parts, data.n, corrected=False)
        se_unc = np.sqrt(np.clip(np.diag(cov_u), 0, None))
    return FitResult(
        theta_hat=theta, covariance=cov, se=se, spec=spec, converged=res.converged,
        iterations=res.iterations, residual=res.residual, lam=lam, pilot=pilot,
        clamp_events=model.clamps.count, se_uncorrected=se_unc,
        condition_number=parts.condition_number,
        nuisance_params={b.name: b.params for b in blocks},
    )
