"""Command-line interface: ``survmed {fit,simulate,bias,calibrate}``.

A config file (flat ``key = value`` lines, keys named like the long options)
may be given with ``--config``; its values override the command-line flags.

Exit status: 0 on success, 2 on a configuration or input error, 3 on a
numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import math
import re
import sys
import warnings
from pathlib import Path

import numpy as np

from . import calibrate as cal
from .coxfit import breslow_cumhaz
from .dataio import DataError, MainData, Schema, Study, ValidationData, _read_csv, load_study, validate_study
from .infer import FIT_ERRORS, BootstrapFailure, bootstrap_ci, sandwich_variance
from .mediate import (
    Contrast,
    Theta,
    approx_measures,
    exact_measures,
    reliability_index,
    reliability_index_nocov,
    theorem1_relbias,
)
from .regress import SingularDesignError

log = logging.getLogger("survmed")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
DISPLAY = {"unadjusted": "Naive", "gold": "Gold", "orc1": "ORC1", "orc2": "ORC2", "rrc": "RRC"}
MEASURES = ("nie", "nde", "te", "mp")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- helpers --
def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(x) for x in re.split(r"[,\s]+", text.strip()) if x]
    except ValueError:
        raise ConfigError(f"{what}: expected a comma-separated list of numbers, got {text!r}") from None


def _pairs(text: str) -> dict[str, str]:
    """``a=1,b=x,y`` -> ``{'a': '1', 'b': 'x,y'}`` (a comma starts a new pair only before ``key=``)."""
    out = {}
    for part in re.split(r",(?=\s*[\w.]+\s*=)", text.strip()):
        if not part.strip():
            continue
        if "=" not in part:
            raise ConfigError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _read_flat(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[survmed]\n" + path.read_text(encoding="utf-8"))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return dict(parser["survmed"])


def _schema(arg: str | None) -> Schema:
    if not arg:
        return Schema()
    mapping = _read_flat(arg) if Path(arg).is_file() else _pairs(arg)
    try:
        return Schema.from_mapping(mapping)
    except DataError as exc:
        raise ConfigError(str(exc)) from None


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, sub: argparse.ArgumentParser):
    """Overlay config-file values on parsed flags; unknown keys are kept in ``args.extra``."""
    args.extra = {}
    if not getattr(args, "config", None):
        return
    actions = {a.dest: a for a in sub._actions}
    for key, raw in _read_flat(args.config).items():
        dest = key.replace("-", "_")
        act = actions.get(dest)
        if act is None:
            args.extra[dest] = raw
            continue
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            val = raw.lower() in ("1", "true", "yes", "on")
        elif act.type is not None:
            try:
                val = act.type(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"config key {key!r}: bad value {raw!r}") from None
        else:
            val = raw
        if act.choices is not None and val not in act.choices:
            raise ConfigError(f"config key {key!r}: {val!r} not in {sorted(act.choices)}")
        setattr(args, dest, val)


def _emit(rows: list[dict], fmt: str, out: str | None, extra: dict | None = None) -> str:
    """Write rows as CSV or JSON to ``out`` (or return the text for stdout)."""
    if fmt == "json":
        payload = {"rows": rows, **(extra or {})}
        text = json.dumps(_jsonable(payload), indent=2)
    else:
        buf = io.StringIO()
        keys = list(dict.fromkeys(k for r in rows for k in r))
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k)) for k in keys})
        text = buf.getvalue()
    if out:
        Path(out).write_text(text, encoding="utf-8")
    return text


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return "" if x is None else x


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (float, np.floating)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# -------------------------------------------------------------------- fit --
def _default_contrast(study: Study, args) -> Contrast:
    """Quartile contrast of the calibrated exposure, covariates at their medians (or given values)."""
    a, a_star = args.contrast_a, args.contrast_astar
    if a is None or a_star is None:
        err = cal.fit_error_model(study)
        mu = err.mean_exposure(study.main.exposure_star, study.main.covariates)
        q25, q75 = np.percentile(mu, [25, 75])
        a = q75 if a is None else a
        a_star = q25 if a_star is None else a_star
    w = np.median(study.main.covariates, axis=0) if study.p else np.zeros(0)
    if args.contrast_w and args.contrast_w.strip().lower() != "median":
        given = _pairs(args.contrast_w)
        for name, val in given.items():
            if name not in study.covariate_names:
                raise ConfigError(f"contrast covariate {name!r} is not in the schema")
            if val.lower() != "median":
                w[study.covariate_names.index(name)] = float(val)
    return Contrast(float(a), float(a_star), tuple(w))


def _methods(text: str) -> list[str]:
    names = [m.strip().lower() for m in text.split(",") if m.strip()]
    alias = {"naive": "unadjusted", "u": "unadjusted", "g": "gold", "o1": "orc1", "o2": "orc2", "r": "rrc"}
    names = [alias.get(m, m) for m in names]
    bad = [m for m in names if m not in cal.METHODS]
    if bad or not names:
        raise ConfigError(f"unknown method(s) {bad}; choose from {cal.METHODS}")
    return names


def cmd_fit(args) -> int:
    study = load_study(args.main, args.validation, _schema(args.schema), args.max_followup)
    methods = _methods(args.method)
    if "gold" in methods and study.main.exposure_true is None:
        raise ConfigError("method 'gold' needs a true-exposure column in the main file")
    contrast = _default_contrast(study, args)
    inference = args.inference
    if args.bootstrap and inference == "sandwich":
        inference = "both"
    if inference != "sandwich" and not args.bootstrap:
        raise ConfigError("bootstrap inference needs --bootstrap B")
    grid = _floats(args.time_grid, "--time-grid") if args.time_grid else []
    interaction = not args.no_interaction

    rows, exact_rows = [], []
    for method in methods:
        fit = cal.fit_method(study, method, k=args.k, include_interaction=interaction)
        theta = Theta(fit.med, fit.out)
        point = approx_measures(theta, contrast)
        row: dict = {"method": DISPLAY[method]}
        ve = None
        if inference in ("sandwich", "both"):
            ve = sandwich_variance(study, method, contrast, k=args.k, include_interaction=interaction, fit=fit,
                                   mp_scale=args.mp_scale)
        bs = None
        if inference in ("bootstrap", "both"):
            bs = bootstrap_ci(study, method, args.bootstrap, args.seed, contrast, k=args.k,
                              include_interaction=interaction, n_jobs=args.n_jobs)
        for name in MEASURES:
            est = getattr(point, name)
            row[name] = float("nan") if est is None else est
            if ve is not None:
                row[f"{name}_se"] = ve.measure_se[name]
                row[f"{name}_lo"] = ve.ci_low[name]
                row[f"{name}_hi"] = ve.ci_high[name]
            if bs is not None:
                row[f"{name}_boot_se"] = bs.percentile.measure_se[name]
                row[f"{name}_boot_lo"] = bs.percentile.ci_low[name]
                row[f"{name}_boot_hi"] = bs.percentile.ci_high[name]
        if bs is not None:
            row["boot_failed"] = bs.n_failed
        rows.append(row)
        if grid:
            m_a = fit.predictor.impute(study.main)
            Z = cal.outcome_design(study.main, m_a, interaction)
            bh = breslow_cumhaz(fit.out.cox, study.main.time, study.main.event, Z)
            for t in grid:
                if not 0 <= t <= study.max_followup:
                    raise ConfigError(f"time-grid value {t:g} outside [0, {study.max_followup:g}]")
                ex = exact_measures(theta, bh, contrast, t, args.quad_order)
                exact_rows.append({"method": DISPLAY[method], "t": t, **{n: getattr(ex, n) for n in MEASURES}})

    info = {
        "contrast": {"a": contrast.a, "a_star": contrast.a_star,
                     "w": dict(zip(study.covariate_names, map(float, contrast.w)))},
        "diagnostics": validate_study(study).as_dict(),
        "k": args.k,
    }
    if args.format == "json":
        text = _emit(rows, "json", args.out, {**info, "exact": exact_rows})
    else:
        text = _emit(rows, "csv", args.out)
        if exact_rows:
            if args.out:
                p = Path(args.out)
                _emit(exact_rows, "csv", str(p.with_name(p.stem + "_exact" + p.suffix)))
            else:
                text += "\n" + _emit(exact_rows, "csv", None)
    if args.out:
        print(_table(rows, contrast))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _table(rows, contrast) -> str:
    """Method x measure table with standard errors in brackets."""
    lines = [f"contrast a*={contrast.a_star:.4g} -> a={contrast.a:.4g}",
             f"{'Method':<8}" + "".join(f"{m.upper():>20}" for m in MEASURES)]
    for r in rows:
        cells = []
        for m in MEASURES:
            se = r.get(f"{m}_se", r.get(f"{m}_boot_se", float("nan")))
            cells.append(f"{r[m]:>10.3f} ({se:.3f})")
        lines.append(f"{r['method']:<8}" + "".join(f"{c:>20}" for c in cells))
    return "\n".join(lines)


# --------------------------------------------------------------- simulate --
def cmd_simulate(args) -> int:
    from .simulate import Scenario, run_scenario

    overrides = dict(args.extra)
    for flag, key in (("replications", "replications"), ("seed", "seed"), ("n1", "n1"), ("n2", "n2"),
                      ("rho_aastar", "rho_aastar"), ("k", "k_rrc"), ("bootstrap", "bootstrap_b"),
                      ("event_rate", "event_rate_target")):
        val = getattr(args, flag)
        if val is not None and key not in overrides:
            overrides[key] = val
    if args.time_grid and "exact_times" not in overrides:
        overrides["exact_times"] = args.time_grid
    if args.k_sweep and "k_sweep" not in overrides:
        overrides["k_sweep"] = args.k_sweep
    try:
        scenario = Scenario.from_mapping(overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario: {exc}") from None
    result = run_scenario(scenario, n_jobs=args.n_jobs)
    if args.format == "json":
        text = json.dumps(_jsonable(result.to_dict()), indent=2)
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
    else:
        text = _emit(result.rows, "csv", args.out)
        if args.out and result.exact_rows:
            p = Path(args.out)
            _emit(result.exact_rows, "csv", str(p.with_name(p.stem + "_exact" + p.suffix)))
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


# ------------------------------------------------------------------- bias --
def cmd_bias(args) -> int:
    mp_grid = _floats(args.mp_grid, "--mp-grid")
    if any(not 0 < m < 1 for m in mp_grid):
        raise ConfigError("MP grid values must lie in (0, 1)")
    gamma1, rho = args.gamma1, args.rho
    if gamma1 is None or rho is None:
        if not args.validation:
            raise ConfigError("give --gamma1 and --rho, or --validation to estimate them")
        study = _validation_study(args)
        err = cal.fit_error_model(study)
        med = cal.fit_mediator(study, err)
        gamma1 = err.gamma1 if gamma1 is None else gamma1
        rho = reliability_index(med.alpha1, med.sigma_alpha2, err.sigma_gamma2) if rho is None else rho
    rows = []
    for mp in mp_grid:
        rb = theorem1_relbias(gamma1, rho, mp)
        rows.append({"gamma1": gamma1, "rho": rho, "mp": mp, **{f"relbias_{k}": v for k, v in rb._asdict().items()}})
    text = _emit(rows, args.format, args.out)
    if args.surface_out:
        am = _floats(args.rho_am_grid, "--rho-am-grid")
        aa = _floats(args.rho_aastar_grid, "--rho-aastar-grid")
        surf = [{"rho_am": x, "rho_aastar": y, "rho": reliability_index_nocov(y, x)} for x in am for y in aa]
        _emit(surf, "csv", args.surface_out)
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


def _validation_study(args) -> Study:
    """Validation data alone, or with the main study when ``--main`` is given."""
    schema = _schema(args.schema)
    if args.main:
        return load_study(args.main, args.validation, schema, args.max_followup)
    cov = list(schema.covariates)
    _, v = _read_csv(args.validation, [schema.time, schema.mediator, schema.exposure_star, schema.exposure, *cov],
                     "validation")
    n = v[schema.time].size
    W = np.column_stack([v[c] for c in cov]) if cov else np.empty((n, 0))
    val = ValidationData(v[schema.time], v[schema.mediator], v[schema.exposure_star], v[schema.exposure], W)
    main = MainData(np.empty(0), np.empty(0), np.empty(0), np.empty(0), np.empty((0, len(cov))))
    return Study(main, val, tuple(cov), float(v[schema.time].max()) if n else 0.0)


# -------------------------------------------------------------- calibrate --
def cmd_calibrate(args) -> int:
    study = _validation_study(args)
    err = cal.fit_error_model(study)
    fit = err.fit
    n, q = fit.n_obs, fit.q
    s2_unbiased = fit.resid_var * n / (n - q) if n > q else float("nan")
    se = np.sqrt(np.diag(fit.xtx_inv) * s2_unbiased)
    diag = cal.residual_diagnostics(err.residuals)
    med = cal.fit_mediator(study, err)
    rho = reliability_index(med.alpha1, med.sigma_alpha2, err.sigma_gamma2)
    names = ["gamma0", "gamma1", *[f"gamma2[{c}]" for c in study.covariate_names]]
    rows = [{"parameter": nm, "estimate": float(c), "se": float(s)} for nm, c, s in zip(names, fit.coefs, se)]
    rows.append({"parameter": "sigma_gamma2", "estimate": err.sigma_gamma2, "se": float("nan")})
    summary = {
        "gamma1": err.gamma1,
        "rho": rho,
        "alpha1": med.alpha1,
        "sigma_alpha2": med.sigma_alpha2,
        "n2": study.n2,
        **diag,
    }
    if diag["skew_flag"]:
        warnings.warn(f"calibration residual skewness {diag['skewness']:.2f} exceeds 1 in magnitude; "
                      "the closed-form ORC2 predictor assumes a normal error", RuntimeWarning, stacklevel=2)
    if args.format == "json":
        text = _emit(rows, "json", args.out, {"summary": summary})
    else:
        text = _emit(rows + [{"parameter": k, "estimate": float(v), "se": float("nan")} for k, v in summary.items()],
                     "csv", args.out)
    if args.residuals_out:
        _emit([{"residual": float(r)} for r in err.residuals], "csv", args.residuals_out)
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


# ----------------------------------------------------------------- parser --
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="survmed", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="flat key = value file; overrides flags")
        sp.add_argument("--out", help="output file (stdout if omitted)")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        if data:
            sp.add_argument("--main", help="main-study CSV")
            sp.add_argument("--validation", help="validation-study CSV")
            sp.add_argument("--schema", help="column map: a key = value file or 'time=T,event=D,covariates=W1;W2'")
            sp.add_argument("--max-followup", type=float, help="t* (default: largest main-study time)")

    f = sub.add_parser("fit", help="estimate mediation measures on user data")
    common(f)
    f.add_argument("--method", default="unadjusted,orc1,orc2,rrc", help="comma-separated methods")
    f.add_argument("--contrast-a", type=float, help="exposure level a (default: upper quartile)")
    f.add_argument("--contrast-astar", type=float, help="reference level a* (default: lower quartile)")
    f.add_argument("--contrast-w", help="covariate profile 'name=value,...' or 'median' (default)")
    f.add_argument("--k", type=int, default=4, help="RRC intervals")
    f.add_argument("--no-interaction", action="store_true", help="drop the exposure-mediator term")
    f.add_argument("--inference", choices=("sandwich", "bootstrap", "both"), default="sandwich")
    f.add_argument("--bootstrap", type=int, default=0, metavar="B", help="bootstrap replicates")
    f.add_argument("--seed", type=int, default=1)
    f.add_argument("--n-jobs", type=int, default=1)
    f.add_argument("--mp-scale", choices=("raw", "logit"), default="raw")
    f.add_argument("--time-grid", help="times for exact measures, e.g. '10,20,30'")
    f.add_argument("--quad-order", type=int, default=40)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run a replication experiment")
    common(s, data=False)
    s.add_argument("--replications", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--n1", type=int)
    s.add_argument("--n2", type=int)
    s.add_argument("--rho-aastar", type=float)
    s.add_argument("--event-rate", type=float)
    s.add_argument("--k", type=int)
    s.add_argument("--k-sweep", help="extra RRC K values, e.g. '2,8'")
    s.add_argument("--bootstrap", type=int, help="bootstrap replicates per dataset (v2 coverage)")
    s.add_argument("--time-grid", help="times for exact-measure bias")
    s.add_argument("--n-jobs", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bias", help="approximate relative-bias table for the unadjusted estimators")
    common(b)
    b.add_argument("--gamma1", type=float)
    b.add_argument("--rho", type=float)
    b.add_argument("--mp-grid", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    b.add_argument("--surface-out", help="CSV of the reliability index over (rho_AM, rho_AA*)")
    b.add_argument("--rho-am-grid", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    b.add_argument("--rho-aastar-grid", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")
    b.set_defaults(func=cmd_bias)

    c = sub.add_parser("calibrate", help="fit and diagnose the measurement-error model")
    common(c)
    c.add_argument("--residuals-out", help="CSV of calibration residuals")
    c.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        _apply_config(parser, args, sub)
        if args.extra and args.command != "simulate":
            raise ConfigError(f"unknown config key(s): {sorted(args.extra)}")
        if args.command in ("fit",) and not (args.main and args.validation):
            raise ConfigError("fit needs --main and --validation")
        if args.command == "calibrate" and not args.validation:
            raise ConfigError("calibrate needs --validation")
        return args.func(args)
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"survmed: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FIT_ERRORS + (BootstrapFailure, SingularDesignError, RuntimeError) as exc:
        print(f"survmed: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"survmed: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
