"""Monte Carlo harness: scenario files, data generation, replication runner, tables.

Two data designs are supported.

``gaussian``
    ``(X, C, Z)`` trivariate normal, ``A ~ N(0, 1)`` independent, outcome
    from the chosen mean form with covariates ``(A, Z)``. ``W = min(X, C)``
    and ``Delta = 1(X <= C)``.
``bartlett``
    ``Z ~ N(mu_z, sd_z^2)``, ``X | Z`` normal, outcome linear in
    ``(X, Z)``; ``X`` is observed with probability ``expit(m0 + mx X + mz Z)``
    and otherwise replaced by ``C = X - Beta(exp(Z), 1)``, so the record is
    censored and the mechanism depends on ``X``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np

from .closed_forms import GaussianConditional
from .errors import CencovError, InvalidInputError
from .estimators import EstimatorSpec, NuisanceConfig, estimate_nuisance, fit_estimator
from .model import CensoredData, MeanSpec
from .nuisance import MisspecInjector, NuisanceBundle, dependent_censoring_law
from .numerics import mvn_sample, replication_rng

__all__ = [
    "EstimatorRow",
    "Scenario",
    "SimulationSummary",
    "FailureCapExceeded",
    "load_scenario",
    "bundled_scenario",
    "list_bundled_scenarios",
    "generate_dataset",
    "known_nuisance",
    "run_replication",
    "run_replications",
    "summarize_to_table",
    "summary_to_csv",
    "conditional_cov_xc",
]

logger = logging.getLogger(__name__)

SPECIAL_KINDS = ("ORACLE", "NAIVE")


class FailureCapExceeded(CencovError):
    """More replications failed than the scenario allows."""


@dataclass(frozen=True)
class EstimatorRow:
    """One row of a simulation grid: an estimator plus an optional injector."""

    label: str
    kind: str
    specification: str = ""
    psi_mode: str = "closed"
    lambda_mode: str = "none"
    probability_source: str = "analytic"
    ipw_weight: str = "pi_xz"
    injector: Optional[MisspecInjector] = None

    @classmethod
    def from_dict(cls, d):
        inj = d.get("injector")
        injector = None if inj is None else MisspecInjector(**inj)
        keys = ("label", "kind", "specification", "psi_mode", "lambda_mode",
                "probability_source", "ipw_weight")
        return cls(injector=injector, **{k: d[k] for k in keys if k in d})

    def to_dict(self):
        out = {"label": self.label, "kind": self.kind, "specification": self.specification,
               "psi_mode": self.psi_mode, "lambda_mode": self.lambda_mode,
               "probability_source": self.probability_source, "ipw_weight": self.ipw_weight}
        if self.injector is not None:
            out["injector"] = {"kind": self.injector.kind, "target": self.injector.target}
        return out

    def spec(self, scenario: "Scenario") -> EstimatorSpec:
        source = self.probability_source
        if self.injector is not None and self.injector.kind == "uniform_pi" \
                and self.injector.target in ("weights", "both"):
            source = "injected"
        ipw_weight = "pi_yz" if self.injector is not None and \
            self.injector.kind == "pi_yz_in_ipw" else self.ipw_weight
        return EstimatorSpec(self.kind, "cens", scenario.dependence, self.psi_mode,
                             self.lambda_mode, source, ipw_weight, scenario.mean)


@dataclass(frozen=True)
class Scenario:
    """Simulation scenario; mirrors the JSON scenario file.

    Attributes
    ----------
    name : str
    n : int
        Records per dataset.
    replications : int
    master_seed : int
    theta_true : tuple
    mean : MeanSpec
    design : {"gaussian", "bartlett"}
    mvn_mean, mvn_cov : tuple
        Mean and covariance of ``(X, C, Z)`` for the gaussian design.
    dependence : {"ind", "dep"}
    nuisance_mode : {"known", "estimated"}
    nuisance_columns : tuple
        Columns of the covariate matrix used by the laws of X and C.
    bartlett : dict
        Parameters of the bartlett design.
    rows : tuple of EstimatorRow
    max_failure_rate : float
    """

    name: str
    n: int
    replications: int
    master_seed: int
    theta_true: tuple
    rows: tuple
    mean: MeanSpec = field(default_factory=lambda: MeanSpec.time_to_event(0))
    design: str = "gaussian"
    mvn_mean: tuple = (0.0, 0.0, 0.0)
    mvn_cov: tuple = ((1.0, 0.25, 0.5), (0.25, 4.0, 0.5), (0.5, 0.5, 1.0))
    dependence: str = "ind"
    nuisance_mode: str = "known"
    nuisance_columns: tuple = (1,)
    bartlett: dict = field(default_factory=dict)
    max_failure_rate: float = 0.02
    description: str = ""

    def __post_init__(self):
        if self.n < 10 or self.replications < 1:
            raise InvalidInputError("need n >= 10 and at least one replication")
        if self.design not in ("gaussian", "bartlett"):
            raise InvalidInputError(f"unknown design {self.design!r}")
        if self.dependence not in ("ind", "dep"):
            raise InvalidInputError(f"unknown dependence {self.dependence!r}")
        if self.nuisance_mode not in ("known", "estimated"):
            raise InvalidInputError(f"unknown nuisance mode {self.nuisance_mode!r}")
        if self.design == "gaussian":
            cov = np.asarray(self.mvn_cov, dtype=float)
            if cov.shape != (3, 3) or not np.allclose(cov, cov.T):
                raise InvalidInputError("mvn_cov must be a symmetric 3x3 matrix")
            if np.linalg.eigvalsh(cov).min() < -1e-10:
                raise InvalidInputError("mvn_cov is not positive semi-definite")
            ccov = conditional_cov_xc(cov)
            if self.dependence == "ind" and abs(ccov) > 1e-12:
                raise InvalidInputError(
                    f"independent censoring needs Cov(X, C | Z) = 0, got {ccov:.4g}"
                )
        if len(self.theta_true) != self.mean.n_params(2 if self.design == "gaussian" else 1):
            raise InvalidInputError("theta_true length does not match the mean form")
        if not self.rows:
            pass
        labels = [r.label for r in self.rows]
        if len(set(labels)) != len(labels):
            raise InvalidInputError("estimator row labels must be unique")

    @classmethod
    def from_dict(cls, d):
        mean = d.get("mean", {"form": "time_to_event", "age_column": 0})
        mvn = d.get("mvn", {})
        kw = dict(
            name=d["name"], n=int(d["n"]), replications=int(d["replications"]),
            master_seed=int(d.get("master_seed", 0)), theta_true=tuple(d["theta_true"]),
            rows=tuple(EstimatorRow.from_dict(r) for r in d.get("estimators", [])),
            mean=MeanSpec(mean["form"], mean.get("age_column")),
            design=d.get("design", "gaussian"), dependence=d.get("dependence", "ind"),
            nuisance_mode=d.get("nuisance_mode", "known"),
            nuisance_columns=tuple(d.get("nuisance_columns", (1,))),
            bartlett=dict(d.get("bartlett", {})),
            max_failure_rate=float(d.get("max_failure_rate", 0.02)),
            description=d.get("description", ""),
        )
        if mvn:
            kw["mvn_mean"] = tuple(mvn.get("mean", (0.0, 0.0, 0.0)))
            kw["mvn_cov"] = tuple(tuple(r) for r in mvn["cov"])
        return cls(**kw)

    def to_dict(self):
        return {
            "name": self.name, "description": self.description, "n": self.n,
            "replications": self.replications, "master_seed": self.master_seed,
            "theta_true": list(self.theta_true),
            "mean": {"form": self.mean.form, "age_column": self.mean.age_column},
            "design": self.design, "mvn": {"mean": list(self.mvn_mean),
                                           "cov": [list(r) for r in self.mvn_cov]},
            "dependence": self.dependence, "nuisance_mode": self.nuisance_mode,
            "nuisance_columns": list(self.nuisance_columns), "bartlett": self.bartlett,
            "max_failure_rate": self.max_failure_rate,
            "estimators": [r.to_dict() for r in self.rows],
        }

    def with_updates(self, **kw) -> "Scenario":
        from dataclasses import replace
        return replace(self, **kw)


def conditional_cov_xc(cov) -> float:
    """``Cov(X, C | Z) = s_XC - s_XZ s_CZ / s_ZZ`` for the ``(X, C, Z)`` ordering."""
    cov = np.asarray(cov, dtype=float)
    return float(cov[0, 1] - cov[0, 2] * cov[1, 2] / cov[2, 2])


def load_scenario(path) -> Scenario:
    """Read a scenario JSON file."""
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as err:
            raise InvalidInputError(f"scenario is not valid JSON: {err}") from None
    try:
        return Scenario.from_dict(data)
    except (KeyError, TypeError) as err:
        raise InvalidInputError(f"scenario is missing or has a malformed field: {err}") from None


def list_bundled_scenarios():
    return sorted(p.name[:-5] for p in resources.files("cencov.scenarios").iterdir()
                  if p.name.endswith(".json"))


def bundled_scenario(name: str) -> Scenario:
    """Load one of the scenario files shipped with the package."""
    ref = resources.files("cencov.scenarios") / f"{name}.json"
    if not ref.is_file():
        raise InvalidInputError(f"no bundled scenario {name!r}; have {list_bundled_scenarios()}")
    return Scenario.from_dict(json.loads(ref.read_text(encoding="utf-8")))


# data generation -------------------------------------------------------------

@dataclass
class SimulatedData:
    """A censored dataset together with the latent covariate."""

    data: CensoredData
    x: np.ndarray

    def oracle(self) -> CensoredData:
        d = self.data
        return CensoredData(d.y, self.x, np.ones(d.n, dtype=int), d.z)

    def naive(self) -> CensoredData:
        d = self.data
        return CensoredData(d.y, d.w, np.ones(d.n, dtype=int), d.z)


def _outcome(theta, x, z, mean: MeanSpec, rng):
    from .model import mean_value
    theta = np.asarray(theta, dtype=float)
    return mean_value(theta, x, z, mean) + theta[-1] * rng.standard_normal(x.size)


def generate_dataset(scenario: Scenario, replication_index: int) -> SimulatedData:
    """Simulate one dataset, deterministic in ``(master_seed, replication_index)``."""
    rng = replication_rng(scenario.master_seed, replication_index, 0)
    n = scenario.n
    if scenario.design == "gaussian":
        xcz = mvn_sample(scenario.mvn_mean, scenario.mvn_cov, n, rng=rng)
        x, c, zz = xcz[:, 0], xcz[:, 1], xcz[:, 2]
        a = rng.standard_normal(n)
        z = np.column_stack([a, zz])
        y = _outcome(scenario.theta_true, x, z, scenario.mean, rng)
        w = np.minimum(x, c)
        delta = (x <= c).astype(int)
    else:
        b = scenario.bartlett
        zz = b.get("z_mean", 0.0) + b.get("z_sd", 1.0) * rng.standard_normal(n)
        x = b["x_intercept"] + b["x_slope"] * zz + b["x_sd"] * rng.standard_normal(n)
        z = zz[:, None]
        y = _outcome(scenario.theta_true, x, z, scenario.mean, rng)
        m0, mx, mz = b["observe_logit"]
        p_obs = 1.0 / (1.0 + np.exp(-(m0 + mx * x + mz * zz)))
        delta = (rng.uniform(size=n) < p_obs).astype(int)
        c = x - rng.beta(np.exp(zz), 1.0)
        w = np.where(delta == 1, x, c)
    return SimulatedData(CensoredData(y, w, delta, z), x)


def _marginal_law(mean, cov, target, cond, column):
    """Law of coordinate ``target`` given coordinate ``cond`` of a normal vector."""
    slope = cov[target, cond] / cov[cond, cond]
    var = cov[target, target] - slope * cov[target, cond]
    return GaussianConditional(mean[target] - slope * mean[cond], (slope,), float(np.sqrt(var)),
                               (column,))


def known_nuisance(scenario: Scenario) -> NuisanceBundle:
    """Nuisance bundle holding the true laws of the scenario."""
    theta = np.asarray(scenario.theta_true, dtype=float)
    if scenario.design == "bartlett":
        b = scenario.bartlett
        xl = GaussianConditional(b["x_intercept"], (b["x_slope"],), b["x_sd"], (0,))
        return NuisanceBundle(x_given_z=xl, outcome_theta=theta,
                              provenance={"x_given_z": "known"})
    cov = np.asarray(scenario.mvn_cov, dtype=float)
    mean = np.asarray(scenario.mvn_mean, dtype=float)
    col = scenario.nuisance_columns[0]
    xl = _marginal_law(mean, cov, 0, 2, col)
    cl = _marginal_law(mean, cov, 1, 2, col)
    ccov = conditional_cov_xc(cov)
    if scenario.dependence == "dep":
        cl = dependent_censoring_law(xl, cl, ccov)
    return NuisanceBundle(x_given_z=xl, c_dist=cl, outcome_theta=theta,
                          cov_xc_given_z=ccov if scenario.dependence == "dep" else 0.0,
                          provenance={"x_given_z": "known", "c_dist": "known"})


# replication -------------------------------------------------------------------

def _needs_kappa(rows):
    return any(r.probability_source == "logistic" for r in rows)


def _needs_alpha(rows):
    return any(r.kind not in ("CC",) + SPECIAL_KINDS and r.probability_source != "logistic"
               for r in rows)


def run_replication(scenario: Scenario, index: int):
    """Fit every grid row on one simulated dataset.

    Returns
    -------
    dict
        ``label -> (theta_hat, se)`` with NaN arrays for failed rows, plus an
        ``"_errors"`` entry mapping labels to error messages and
        ``"_censoring"`` with the share of censored records.
    """
    sim = generate_dataset(scenario, index)
    data = sim.data
    p = len(scenario.theta_true)
    out = {"_errors": {}, "_censoring": float(1 - data.delta.mean()), "_clamps": {}}
    base = known_nuisance(scenario)
    blocks = []
    try:
        if scenario.nuisance_mode == "estimated" or _needs_kappa(scenario.rows):
            cfg = NuisanceConfig(
                base=base,
                estimate_alpha=scenario.nuisance_mode == "estimated" and _needs_alpha(scenario.rows),
                estimate_kappa=_needs_kappa(scenario.rows),
                known_cov_xc_given_z=base.cov_xc_given_z or 0.0,
                x_columns=scenario.nuisance_columns, c_columns=scenario.nuisance_columns)
            probe = EstimatorSpec("CC", "cens", scenario.dependence, mean=scenario.mean)
            base, blocks = estimate_nuisance(probe, data, cfg)
            if cfg.estimate_alpha:
                base = base.with_updates(outcome_theta=None)
    except Exception as err:  # noqa: BLE001 - a failed nuisance fit fails every row
        for row in scenario.rows:
            out[row.label] = (np.full(p, np.nan), np.full(p, np.nan))
            out["_errors"][row.label] = f"nuisance: {err}"
        return out
    pilots = {}
    for row in scenario.rows:
        try:
            if row.kind in SPECIAL_KINDS:
                d = sim.oracle() if row.kind == "ORACLE" else sim.naive()
                spec = EstimatorSpec("CC", "cens", scenario.dependence, mean=scenario.mean)
                fit = fit_estimator(spec, d, base)
            else:
                spec = row.spec(scenario)
                bundle = base
                if row.injector is not None:
                    # one draw per replication so rows sharing an injector see the same values
                    rng = replication_rng(scenario.master_seed, index, 1)
                    bundle = row.injector.apply(bundle, data.n, rng)
                key = ("IPW", spec.probability_source) if spec.kind == "AIPW" else ("CC",)
                cacheable = row.injector is None or key == ("CC",)
                pilot = pilots.get(key) if spec.lambda_mode != "none" and cacheable else None
                fit = fit_estimator(spec, data, bundle, blocks=blocks, pilot=pilot)
                if spec.kind == "CC":
                    pilots[("CC",)] = fit.theta_hat
                elif fit.pilot is not None and cacheable:
                    pilots.setdefault(key, fit.pilot)
            out[row.label] = (fit.theta_hat, fit.se)
            out["_clamps"][row.label] = fit.clamp_events
        except Exception as err:  # noqa: BLE001 - failures are counted, not fatal
            out[row.label] = (np.full(p, np.nan), np.full(p, np.nan))
            out["_errors"][row.label] = f"{type(err).__name__}: {err}"
            logger.warning("replication %d row %s failed: %s", index, row.label, err)
    return out


@dataclass
class SimulationSummary:
    """Aggregated Monte Carlo results.

    ``stats[label]`` maps metric names to per-coefficient arrays:
    ``mean_estimate``, ``mean_bias``, ``percent_bias``, ``mean_se``,
    ``sd``, ``coverage`` (percent), plus ``n_ok`` and ``failures``.
    ``estimates[label]`` and ``ses[label]`` keep the raw ``(N, p)`` arrays.
    """

    scenario: Scenario
    stats: dict
    estimates: dict
    ses: dict
    failures: dict
    errors: list
    censoring_rate: float
    clamp_events: dict

    def row(self, label):
        return self.stats[label]

    def to_dict(self):
        def clean(v):
            if isinstance(v, np.ndarray):
                return [None if not np.isfinite(x) else float(x) for x in v]
            return v
        return {
            "scenario": self.scenario.to_dict(),
            "censoring_rate": self.censoring_rate,
            "rows": [
                {"label": r.label, "specification": r.specification,
                 **{k: clean(v) for k, v in self.stats[r.label].items()},
                 "clamp_events": int(self.clamp_events.get(r.label, 0))}
                for r in self.scenario.rows
            ],
            "errors": self.errors[:50],
        }


def _aggregate(scenario: Scenario, results):
    theta0 = np.asarray(scenario.theta_true, dtype=float)
    zq = 1.959963984540054
    stats, ests, ses, failures, clamps = {}, {}, {}, {}, {}
    errors = []
    for row in scenario.rows:
        est = np.array([r[row.label][0] for r in results])
        se = np.array([r[row.label][1] for r in results])
        ok = np.all(np.isfinite(est), axis=1) & np.all(np.isfinite(se), axis=1)
        ests[row.label], ses[row.label] = est, se
        failures[row.label] = int((~ok).sum())
        clamps[row.label] = int(sum(r["_clamps"].get(row.label, 0) for r in results))
        e, s = est[ok], se[ok]
        m = ok.sum()
        with np.errstate(divide="ignore", invalid="ignore"):
            pct = np.where(theta0 != 0, (e - theta0) / theta0, np.nan).mean(0) * 100 if m else \
                np.full(theta0.size, np.nan)
        covers = np.abs(e - theta0) <= zq * s
        stats[row.label] = {
            "mean_estimate": e.mean(0) if m else np.full(theta0.size, np.nan),
            "mean_bias": (e - theta0).mean(0) if m else np.full(theta0.size, np.nan),
            "percent_bias": pct,
            "mean_se": s.mean(0) if m else np.full(theta0.size, np.nan),
            "sd": e.std(0, ddof=1) if m > 1 else np.full(theta0.size, np.nan),
            "coverage": covers.mean(0) * 100 if m else np.full(theta0.size, np.nan),
            "n_ok": int(m),
            "failures": failures[row.label],
        }
    for i, r in enumerate(results):
        for label, msg in r["_errors"].items():
            errors.append({"replication": i, "label": label, "error": msg})
    cens = float(np.mean([r["_censoring"] for r in results]))
    return SimulationSummary(scenario, stats, ests, ses, failures, errors, cens, clamps)


def _worker(args):
    scenario, index = args
    return run_replication(scenario, index)


def resolve_threads(threads: Optional[int] = None) -> int:
    if threads is None:
        env = os.environ.get("CENCOV_THREADS")
        threads = int(env) if env else 1
    return max(1, int(threads))


def run_replications(scenario: Scenario, threads: Optional[int] = None,
                     enforce_cap: bool = True) -> SimulationSummary:
    """Run every replication of a scenario and aggregate.

    Replications run in worker processes when ``threads > 1``; results are
    keyed by replication index so the output does not depend on scheduling.

    Raises
    ------
    FailureCapExceeded
        If some row fails in more than ``max_failure_rate`` of replications.
    """
    threads = resolve_threads(threads)
    jobs = [(scenario, i) for i in range(scenario.replications)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_worker, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    else:
        results = [_worker(j) for j in jobs]
    summary = _aggregate(scenario, results)
    if enforce_cap:
        cap = scenario.max_failure_rate * scenario.replications
        worst = max(summary.failures.values(), default=0)
        if worst > cap:
            bad = {k: v for k, v in summary.failures.items() if v > cap}
            raise FailureCapExceeded(
                f"failure cap exceeded: {bad} of {scenario.replications} replications "
                f"(cap {scenario.max_failure_rate:.0%}); first error: "
                f"{summary.errors[0]['error'] if summary.errors else 'n/a'}"
            )
    return summary


def coefficient_names(scenario: Scenario):
    k = 2 if scenario.design == "gaussian" else 1
    p = scenario.mean.n_params(k)
    names = ["beta0", "beta_x"] + [f"beta_z{j + 1}" for j in range(p - 3)] + ["sigma"]
    return names


def _fmt(v, scale=1.0):
    return "" if v is None or not np.isfinite(v) else f"{v * scale:.2f}"


def summarize_to_table(summary: SimulationSummary, coefficients=None):
    """Rows with columns Estimate, Bias, SE, SD (both x100) and 95% coverage.

    Returns a list of dicts with string-formatted values; SD is blank when
    fewer than two replications succeeded.
    """
    if summary is None:
        return []
    names = coefficient_names(summary.scenario)
    idx = range(len(names)) if coefficients is None else coefficients
    rows = []
    for j in idx:
        for r in summary.scenario.rows:
            st = summary.stats[r.label]
            rows.append({
                "coefficient": names[j], "estimator": r.label, "specification": r.specification,
                "Estimate": _fmt(st["mean_estimate"][j]), "Bias": _fmt(st["mean_bias"][j]),
                "PctBias": _fmt(st["percent_bias"][j]), "SE": _fmt(st["mean_se"][j], 100),
                "SD": _fmt(st["sd"][j], 100), "Cov95": _fmt(st["coverage"][j]),
                "n_ok": str(st["n_ok"]),
            })
    return rows


TABLE_COLUMNS = ["coefficient", "estimator", "specification", "Estimate", "Bias", "PctBias",
                 "SE", "SD", "Cov95", "n_ok"]


def summary_to_csv(summary: SimulationSummary) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in summarize_to_table(summary):
        writer.writerow(row)
    return buf.getvalue()


def format_table(rows) -> str:
    """Fixed-width text rendering of :func:`summarize_to_table` output."""
    if not rows:
        return ""
    cols = ["coefficient", "estimator", "Estimate", "Bias", "SE", "SD", "Cov95"]
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    for r in rows:
        lines.append("  ".join(str(r[c]).ljust(widths[c]) for c in cols))
    return "\n".join(lines)
