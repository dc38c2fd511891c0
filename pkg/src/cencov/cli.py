"""Command-line interface.

``cencov fit --config cfg.json``
    Fit one estimator to a CSV dataset and write a JSON result.
``cencov simulate --scenario ind_known [--threads N]``
    Run a bundled or user scenario and write CSV/JSON summaries.
``cencov version``

Exit codes: 0 success, 2 invalid input or configuration, 3 solver did not
converge (the result JSON is still written), 4 too many failed replications.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .closed_forms import GaussianConditional
from .errors import CencovError, ConfigurationError, ConvergenceError, InvalidInputError
from .estimators import EstimatorSpec, NuisanceConfig, estimate_nuisance, fit_estimator
from .inference import confidence_intervals
from .model import CensoredData, MeanSpec, MissingData
from .nuisance import MisspecInjector, NuisanceBundle
from .numerics import SolverConfig

__all__ = ["FitConfig", "main", "read_csv_data", "write_csv_data", "run_fit", "run_simulate"]

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED, EXIT_FAILURE_CAP = 0, 2, 3, 4

CENSORED_DEFAULTS = {"y": "y", "w": "w", "delta": "delta"}
MISSING_DEFAULTS = {"y": "y", "x": "x", "r": "r"}


@dataclass
class FitConfig:
    """Parsed ``cencov fit`` configuration.

    Attributes
    ----------
    input : str
        CSV path, resolved relative to the config file.
    layout : {"censored", "missing"}
    columns : dict
        Column names for ``y``, ``w``/``x``, ``delta``/``r``, the list ``z``
        and an optional ``age`` column.
    estimator : dict
        :class:`EstimatorSpec` fields; ``mean`` is ``{"form": ...}``.
    nuisance : dict
        ``mode`` is ``estimate``, ``known`` or ``injected``.
    output : str, optional
    seed : int
    solver : dict
    """

    input: str
    layout: str = "censored"
    columns: dict = field(default_factory=dict)
    estimator: dict = field(default_factory=dict)
    nuisance: dict = field(default_factory=lambda: {"mode": "estimate"})
    output: Optional[str] = None
    seed: int = 0
    solver: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d, base_dir: Path | None = None):
        if "input" not in d:
            raise InvalidInputError("config needs an 'input' CSV path")
        base_dir = base_dir or Path.cwd()
        cols = dict(d.get("columns", {}))
        problem = dict(d.get("estimator", {})).get("problem")
        layout = d.get("layout") or ("missing" if "r" in cols or "x" in cols or problem == "miss"
                                     else "censored")
        if layout not in ("censored", "missing"):
            raise InvalidInputError(f"layout must be 'censored' or 'missing', got {layout!r}")
        inp = Path(d["input"])
        out = d.get("output")
        return cls(
            input=str(inp if inp.is_absolute() else base_dir / inp), layout=layout, columns=cols,
            estimator=dict(d.get("estimator", {})),
            nuisance=dict(d.get("nuisance", {"mode": "estimate"})),
            output=None if out is None else str(Path(out) if Path(out).is_absolute()
                                                 else base_dir / out),
            seed=int(d.get("seed", 0)), solver=dict(d.get("solver", {})),
        )


# data IO -------------------------------------------------------------------------

def _float(value, column, line):
    try:
        v = float(value)
    except ValueError:
        raise InvalidInputError(f"line {line}: column {column!r} is not numeric: {value!r}") from None
    if not np.isfinite(v):
        raise InvalidInputError(f"line {line}: column {column!r} is not finite")
    return v


def read_csv_data(path, layout: str = "censored", columns: dict | None = None):
    """Read a CSV file into :class:`CensoredData` or :class:`MissingData`.

    Covariate columns default to every header starting with ``z``, in file
    order. An ``age`` column, when present, becomes covariate 0.

    Returns
    -------
    data, z_names, has_age
    """
    columns = dict(columns or {})
    defaults = CENSORED_DEFAULTS if layout == "censored" else MISSING_DEFAULTS
    names = {k: columns.get(k, v) for k, v in defaults.items()}
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as err:
        raise InvalidInputError(f"cannot read {path}: {err.strerror}") from None
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for role, col in names.items():
            if col not in header:
                raise InvalidInputError(f"missing required column {col!r} (role {role}) in {path}")
        z_cols = columns.get("z")
        if z_cols is None:
            z_cols = [h for h in header if h.startswith("z")]
        age = columns.get("age", "age" if "age" in header else None)
        for col in list(z_cols) + ([age] if age else []):
            if col not in header:
                raise InvalidInputError(f"missing covariate column {col!r} in {path}")
        covs = ([age] if age else []) + list(z_cols)
        if not covs:
            raise InvalidInputError("at least one covariate column is required")
        y, v, ind, z = [], [], [], []
        key_v = "w" if layout == "censored" else "x"
        key_i = "delta" if layout == "censored" else "r"
        for line, row in enumerate(reader, start=2):
            y.append(_float(row[names["y"]], names["y"], line))
            flag = _float(row[names[key_i]], names[key_i], line)
            if flag not in (0.0, 1.0):
                raise InvalidInputError(f"line {line}: {names[key_i]!r} must be 0 or 1")
            ind.append(int(flag))
            raw = row[names[key_v]].strip()
            if layout == "missing" and flag == 0:
                if raw not in ("", "nan", "NA"):
                    raise InvalidInputError(f"line {line}: x must be blank when r = 0")
                v.append(np.nan)
            else:
                v.append(_float(raw, names[key_v], line))
            z.append([_float(row[c], c, line) for c in covs])
    if not y:
        raise InvalidInputError(f"{path} has no data rows")
    z = np.asarray(z, dtype=float)
    if layout == "censored":
        data = CensoredData(np.asarray(y), np.asarray(v), np.asarray(ind), z)
    else:
        data = MissingData(np.asarray(y), np.asarray(v), np.asarray(ind), z)
    return data, covs, age is not None


def write_csv_data(data, path, z_names=None):
    """Write a dataset in the layout read by :func:`read_csv_data`.

    Floats use ``repr`` so reading back gives identical arrays.
    """
    k = data.z.shape[1]
    z_names = list(z_names) if z_names is not None else [f"z{j + 1}" for j in range(k)]
    if data.problem == "cens":
        head, cols = ["y", "w", "delta"], (data.y, data.w, data.delta)
    else:
        head, cols = ["y", "x", "r"], (data.y, data.x, data.r)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(head + z_names)
        for i in range(data.n):
            row = []
            for name, col in zip(head, cols):
                val = col[i]
                if name in ("delta", "r"):
                    row.append(str(int(val)))
                elif np.isnan(val):
                    row.append("")
                else:
                    row.append(repr(float(val)))
            row += [repr(float(x)) for x in data.z[i]]
            writer.writerow(row)


# fit -----------------------------------------------------------------------------

def _mean_spec(d, has_age):
    d = dict(d or {})
    form = d.get("form", "time_to_event" if has_age else "linear")
    if form == "time_to_event":
        return MeanSpec.time_to_event(int(d.get("age_column", 0)))
    return MeanSpec.linear()


def _estimator_spec(cfg: FitConfig, has_age: bool) -> EstimatorSpec:
    e = dict(cfg.estimator)
    if "kind" not in e:
        raise InvalidInputError("estimator.kind is required")
    mean = _mean_spec(e.pop("mean", None), has_age)
    problem = e.pop("problem", "cens" if cfg.layout == "censored" else "miss")
    if (problem == "cens") != (cfg.layout == "censored"):
        raise InvalidInputError(f"problem {problem!r} does not match the {cfg.layout} layout")
    allowed = {"kind", "dependence", "psi_mode", "lambda_mode", "probability_source", "ipw_weight"}
    unknown = set(e) - allowed
    if unknown:
        raise InvalidInputError(f"unknown estimator fields: {sorted(unknown)}")
    return EstimatorSpec(problem=problem, mean=mean, **e)


def _known_bundle(nu: dict) -> NuisanceBundle:
    def law(key):
        return GaussianConditional.from_dict(nu[key]) if nu.get(key) is not None else None

    kappa = nu.get("kappa")
    xi = nu.get("xi")
    theta = nu.get("outcome_theta")
    return NuisanceBundle(
        x_given_z=law("x_given_z"), c_dist=law("c_dist"),
        kappa=None if kappa is None else np.asarray(kappa, dtype=float),
        xi=None if xi is None else np.asarray(xi, dtype=float),
        outcome_theta=None if theta is None else np.asarray(theta, dtype=float),
        cov_xc_given_z=nu.get("cov_xc_given_z"),
        provenance={k: "known" for k in ("x_given_z", "c_dist", "kappa", "xi") if nu.get(k) is not None},
    )


def _ols_x_law(data: MissingData) -> GaussianConditional:
    """Normal law of X given all covariates fitted on complete records."""
    obs = data.r == 1
    design = np.column_stack([np.ones(obs.sum()), data.z[obs]])
    coef, *_ = np.linalg.lstsq(design, data.x[obs], rcond=None)
    resid = data.x[obs] - design @ coef
    return GaussianConditional(float(coef[0]), tuple(coef[1:]), float(np.sqrt(np.mean(resid**2))))


def _nuisance(spec: EstimatorSpec, data, cfg: FitConfig):
    nu = dict(cfg.nuisance)
    mode = nu.get("mode", "estimate")
    if mode not in ("estimate", "known", "injected"):
        raise InvalidInputError(f"nuisance.mode must be estimate, known or injected, got {mode!r}")
    bundle = _known_bundle(nu)
    blocks = []
    if mode == "estimate" and spec.kind != "CC":
        if spec.problem == "cens":
            need_alpha = spec.kind == "MLE" or spec.augmented or \
                (spec.probability_source != "logistic" and spec.kind == "IPW")
            ncfg = NuisanceConfig(
                base=bundle, estimate_alpha=need_alpha,
                estimate_kappa=spec.probability_source == "logistic",
                known_cov_xc_given_z=float(nu.get("cov_xc_given_z") or 0.0),
                x_columns=nu.get("x_columns"), c_columns=nu.get("c_columns"))
        else:
            if spec.dependence == "dep" and spec.kind in ("IPW", "MACC", "AIPW"):
                raise ConfigurationError(
                    "dependent missingness weights depend on x and cannot be estimated from "
                    "the observed data; supply nuisance.xi with mode 'known'")
            if spec.kind == "MLE" or spec.augmented:
                bundle = bundle.with_updates(x_given_z=_ols_x_law(data),
                                             provenance={"x_given_z": "estimated"})
            ncfg = NuisanceConfig(base=bundle, estimate_kappa=True)
        bundle, blocks = estimate_nuisance(spec, data, ncfg)
    if mode == "injected":
        inj = nu.get("injector")
        if not inj:
            raise InvalidInputError("nuisance.mode 'injected' needs an 'injector' block")
        bundle = MisspecInjector(**inj).apply(bundle, data.n, np.random.default_rng(cfg.seed))
    return bundle, blocks


def coefficient_labels(spec: EstimatorSpec, cov_names):
    if spec.mean.form == "time_to_event":
        age = cov_names[spec.mean.age_column]
        rest = [c for j, c in enumerate(cov_names) if j != spec.mean.age_column]
        return ["beta0", f"beta_x ({age} - x)"] + [f"beta_{c}" for c in rest] + ["sigma"]
    return ["beta0", "beta_x"] + [f"beta_{c}" for c in cov_names] + ["sigma"]


def _coef_table(labels, theta, se, ci):
    width = max(len(s) for s in labels)
    lines = [f"{'coefficient'.ljust(width)}  {'estimate':>12}  {'se':>10}  {'95% ci':>25}"]
    for lab, t, s, (lo, hi) in zip(labels, theta, se, ci):
        lines.append(f"{lab.ljust(width)}  {t:12.5f}  {s:10.5f}  [{lo:10.5f}, {hi:10.5f}]")
    return "\n".join(lines)


def run_fit(cfg: FitConfig, out=None) -> tuple[int, dict]:
    """Execute ``cencov fit``; returns ``(exit_code, document)``."""
    out = out or sys.stdout
    doc = {"cencov_version": __version__, "command": "fit", "seed": cfg.seed,
           "input": cfg.input, "status": "error"}
    try:
        data, cov_names, has_age = read_csv_data(cfg.input, cfg.layout, cfg.columns)
        spec = _estimator_spec(cfg, has_age)
        doc["spec"] = spec.to_dict()
        bundle, blocks = _nuisance(spec, data, cfg)
        solver = SolverConfig(**cfg.solver)
        fit = fit_estimator(spec, data, bundle, blocks=blocks, solver=solver)
    except ConvergenceError as err:
        doc.update(status="not_converged", error=str(err),
                   diagnostics={"stage": err.stage, "iterations": err.iterations,
                                "residual": err.residual,
                                "last": None if err.last is None else np.asarray(err.last).tolist()})
        _write(cfg, doc)
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NONCONVERGED, doc
    except (InvalidInputError, ConfigurationError, TypeError) as err:
        doc["error"] = str(err)
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID, doc
    except CencovError as err:
        # singular bread or degenerate denominators: no usable fit
        doc.update(status="numerical_failure", error=f"{type(err).__name__}: {err}")
        _write(cfg, doc)
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NONCONVERGED, doc
    labels = coefficient_labels(spec, cov_names)
    ci = confidence_intervals(fit, 0.95)
    doc.update(status="converged", n=int(data.n), observed=int(data.d.sum()),
               coefficients=labels, result=fit.to_dict(), ci95=ci.tolist(),
               nuisance={"provenance": dict(bundle.provenance)})
    _write(cfg, doc)
    print(_coef_table(labels, fit.theta_hat, fit.se, ci), file=out)
    return EXIT_OK, doc


def _write(cfg: FitConfig, doc):
    if cfg.output:
        Path(cfg.output).parent.mkdir(parents=True, exist_ok=True)
        with open(cfg.output, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, allow_nan=False, default=_json_default)
            fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


# simulate ----------------------------------------------------------------------

def run_simulate(scenario_ref: str, out_dir: str = ".", threads: Optional[int] = None,
                 replications: Optional[int] = None, seed: Optional[int] = None,
                 out=None) -> int:
    """Execute ``cencov simulate``; returns the exit code."""
    out = out or sys.stdout
    from .simulation import (
        FailureCapExceeded,
        bundled_scenario,
        format_table,
        load_scenario,
        run_replications,
        summarize_to_table,
        summary_to_csv,
    )
    try:
        if os.path.exists(scenario_ref):
            scenario = load_scenario(scenario_ref)
        else:
            scenario = bundled_scenario(scenario_ref)
        updates = {}
        if replications is not None:
            updates["replications"] = replications
        if seed is not None:
            updates["master_seed"] = seed
        if updates:
            scenario = scenario.with_updates(**updates)
        summary = run_replications(scenario, threads=threads)
    except FailureCapExceeded as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAILURE_CAP
    except (InvalidInputError, ConfigurationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    stem = out_path / f"{scenario.name}_summary"
    Path(f"{stem}.csv").write_text(summary_to_csv(summary), encoding="utf-8")
    doc = {"cencov_version": __version__, "command": "simulate",
           "seed": scenario.master_seed, **summary.to_dict()}
    with open(f"{stem}.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, allow_nan=False, default=_json_default)
        fh.write("\n")
    print(f"scenario {scenario.name}: n={scenario.n}, replications={scenario.replications}, "
          f"seed={scenario.master_seed}, censoring rate {summary.censoring_rate:.3f}", file=out)
    print(format_table(summarize_to_table(summary, coefficients=[0])), file=out)
    print(f"wrote {stem}.csv and {stem}.json", file=out)
    return EXIT_OK


# entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cencov", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_fit = sub.add_parser("fit", help="fit an estimator to CSV data")
    p_fit.add_argument("--config", required=True, help="JSON fit configuration")
    p_fit.add_argument("--output", help="override the output path in the config")
    p_sim = sub.add_parser("simulate", help="run a simulation scenario")
    p_sim.add_argument("--scenario", required=True, help="scenario JSON path or bundled name")
    p_sim.add_argument("--threads", type=int, default=None,
                       help="worker processes (default: $CENCOV_THREADS or 1)")
    p_sim.add_argument("--out-dir", default=".", help="directory for summary files")
    p_sim.add_argument("--replications", type=int, default=None)
    p_sim.add_argument("--seed", type=int, default=None, help="override the master seed")
    sub.add_parser("version", help="print the package version")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "version":
        print(__version__)
        return EXIT_OK
    if args.command == "fit":
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
            cfg = FitConfig.from_dict(raw, Path(args.config).resolve().parent)
        except (OSError, json.JSONDecodeError, InvalidInputError) as err:
            print(f"error: invalid config: {err}", file=sys.stderr)
            return EXIT_INVALID
        if args.output:
            cfg.output = args.output
        code, _ = run_fit(cfg)
        return code
    try:
        return run_simulate(args.scenario, args.out_dir, args.threads, args.replications, args.seed)
    except CencovError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
