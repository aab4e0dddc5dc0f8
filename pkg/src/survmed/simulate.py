"""Synthetic main/validation studies and replication experiments.

The generator draws ``(M, A, W)`` jointly normal (variances 0.5, pairwise
correlations 0.2), a surrogate ``A* = rho A + e`` with ``Var(A*) = Var(A)``,
Weibull-baseline Cox failure times, exponential censoring and administrative
censoring at ``t_star``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .calibrate import ErrParams, MedParams, OutParams, fit_method, outcome_design
from .coxfit import breslow_cumhaz
from .dataio import MainData, Study, ValidationData
from .infer import FIT_ERRORS, MAX_FAILURE_RATE, bootstrap_ci, sandwich_variance
from .mediate import Contrast, Theta, approx_measures, exact_measures

log = logging.getLogger(__name__)

VAR = 0.5
CORR = 0.2
CALIBRATION_N = 100_000
CALIBRATION_SEED = 20230101
RATE_TOL = 0.002


@dataclass(frozen=True)
class Scenario:
    n1: int = 10_000
    n2: int = 250
    rho_aastar: float = 0.4
    te_target: float = math.log(1.5)
    mp_target: float = 0.3
    beta3: float = math.log(1.1)
    beta4: float = math.log(1.1)
    event_rate_target: float = 0.05
    censor_rate: float = 0.01
    t_star: float = 50.0
    weibull_shape: float = 6.0
    k_rrc: int = 4
    replications: int = 500
    seed: int = 2023
    error_dist: str = "normal"
    skew_shape: float = 5.0
    k_sweep: tuple[int, ...] = ()
    bootstrap_b: int = 0
    exact_times: tuple[float, ...] = ()
    methods: tuple[str, ...] = ("unadjusted", "gold", "orc1", "orc2", "rrc")
    sandwich: bool = True

    def __post_init__(self):
        for name in ("event_rate_target", "mp_target"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not 0 < self.rho_aastar <= 1:
            raise ValueError("rho_aastar must lie in (0, 1]")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.n1 < 1 or self.n2 < 1:
            raise ValueError("n1 and n2 must be positive")
        if self.error_dist not in ("normal", "skew-normal"):
            raise ValueError("error_dist must be 'normal' or 'skew-normal'")

    @classmethod
    def from_mapping(cls, m: Mapping) -> "Scenario":
        """Build from string-valued config entries (flat ``key = value`` files)."""
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in m.items():
            key = key.strip()
            if key not in types:
                raise ValueError(f"unknown scenario key {key!r}")
            kind = types[key]
            if not isinstance(raw, str):
                kw[key] = tuple(raw) if "tuple" in str(kind) else raw
                continue
            raw = raw.strip()
            if "tuple[int" in str(kind):
                kw[key] = tuple(int(x) for x in raw.replace(",", " ").split())
            elif "tuple[float" in str(kind):
                kw[key] = tuple(float(x) for x in raw.replace(",", " ").split())
            elif "tuple[str" in str(kind):
                kw[key] = tuple(x for x in raw.replace(",", " ").split())
            elif kind in ("int", int):
                kw[key] = int(float(raw))
            elif kind in ("float", float):
                kw[key] = _parse_float(raw)
            elif kind in ("bool", bool):
                kw[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                kw[key] = raw
        return cls(**kw)


def _parse_float(raw: str) -> float:
    raw = raw.strip()
    if raw.startswith("log(") and raw.endswith(")"):
        return math.log(float(raw[4:-1]))
    return float(raw)


def _mvn_cov() -> np.ndarray:
    """Covariance of ``(M, A, W)``."""
    return VAR * (np.full((3, 3), CORR) + (1 - CORR) * np.eye(3))


def _joint_cov(rho: float) -> np.ndarray:
    """Covariance of ``(M, A, W, A*)`` implied by the generator."""
    S = np.zeros((4, 4))
    S[:3, :3] = _mvn_cov()
    S[3, :3] = S[:3, 3] = rho * S[1, :3]
    S[3, 3] = rho**2 * VAR + VAR * (1 - rho**2)
    return S


def _project(S, target: int, preds: Sequence[int]):
    Spp = S[np.ix_(preds, preds)]
    Spt = S[preds, target]
    coef = np.linalg.solve(Spp, Spt)
    return coef, float(S[target, target] - Spt @ coef)


def implied_mediator() -> MedParams:
    """Regression of M on (A, W) implied by the covariance matrix (means are zero)."""
    coef, s2 = _project(_joint_cov(1.0), 0, [1, 2])
    return MedParams(0.0, float(coef[0]), coef[1:].copy(), s2)


def implied_error(rho: float) -> ErrParams:
    """Regression of A on (A*, W) implied by the generator."""
    coef, s2 = _project(_joint_cov(rho), 1, [3, 2])
    return ErrParams(0.0, float(coef[0]), coef[1:].copy(), s2)


def implied_orc1(rho: float) -> np.ndarray:
    """Population coefficients of A on (1, A*, M, W)."""
    coef, _ = _project(_joint_cov(rho), 1, [3, 0, 2])
    return np.concatenate([[0.0], coef])


def implied_rho(rho_aastar: float) -> float:
    from .mediate import reliability_index

    med, err = implied_mediator(), implied_error(rho_aastar)
    return reliability_index(med.alpha1, med.sigma_alpha2, err.sigma_gamma2)


def solve_outcome_betas(scenario: Scenario, med: MedParams | None = None) -> tuple[float, float]:
    """Choose ``(beta1, beta2)`` so the rare-outcome TE and MP at ``a=1, a*=0, w=0`` hit the targets."""
    med = implied_mediator() if med is None else med
    if med.alpha1 == 0:
        raise ValueError("alpha1 = 0: the indirect effect cannot be targeted")
    b3, s2 = scenario.beta3, med.sigma_alpha2
    beta2 = scenario.mp_target * scenario.te_target / med.alpha1 - b3
    beta1 = (1 - scenario.mp_target) * scenario.te_target - b3 * (med.alpha0 + beta2 * s2) - 0.5 * b3**2 * s2
    return float(beta1), float(beta2)


def true_theta(scenario: Scenario) -> Theta:
    med = implied_mediator()
    b1, b2 = solve_outcome_betas(scenario, med)
    out = OutParams(b1, b2, scenario.beta3, np.array([scenario.beta4]), np.full((4, 4), np.nan))
    return Theta(med, out)


def _draw(n: int, scenario: Scenario, rng: np.random.Generator):
    L = np.linalg.cholesky(_mvn_cov())
    X = rng.standard_normal((n, 3)) @ L.T
    M, A, W = X[:, 0], X[:, 1], X[:, 2]
    rho = scenario.rho_aastar
    sd_e = math.sqrt(VAR * (1 - rho**2))
    if scenario.error_dist == "normal":
        e = sd_e * rng.standard_normal(n)
    else:
        dist = stats.skewnorm(scenario.skew_shape)
        raw = dist.ppf(rng.random(n))
        e = sd_e * (raw - dist.mean()) / dist.std()
    astar = rho * A + e
    U = rng.random(n)
    C = rng.exponential(1.0 / scenario.censor_rate, n) if scenario.censor_rate > 0 else np.full(n, np.inf)
    return M, A, W, astar, U, C


def _failure_times(U, lp, v, shape):
    return (1.0 / v) * (-np.log(U) * np.exp(-lp)) ** (1.0 / shape)


def _lp(betas, scenario, A, M, W):
    b1, b2 = betas
    return b1 * A + b2 * M + scenario.beta3 * A * M + scenario.beta4 * W


def event_rate(scenario: Scenario, betas, v: float, n: int = CALIBRATION_N, seed: int = CALIBRATION_SEED) -> float:
    """Monte Carlo cumulative event proportion ``P(T~ <= min(C, t*))``."""
    M, A, W, _, U, C = _draw(n, scenario, np.random.default_rng(seed))
    T = _failure_times(U, _lp(betas, scenario, A, M, W), v, scenario.weibull_shape)
    return float(np.mean(T <= np.minimum(C, scenario.t_star)))


@lru_cache(maxsize=64)
def _calibrate_cached(key, betas):
    scenario = Scenario(**dict(key))
    rng = np.random.default_rng(CALIBRATION_SEED)
    M, A, W, _, U, C = _draw(CALIBRATION_N, scenario, rng)
    base = (-np.log(U) * np.exp(-_lp(betas, scenario, A, M, W))) ** (1.0 / scenario.weibull_shape)
    limit = np.minimum(C, scenario.t_star)

    def rate(log_v):
        return float(np.mean(base / math.exp(log_v) <= limit))

    target = scenario.event_rate_target
    lo, hi = math.log(1e-6), math.log(1e2)
    if not rate(lo) < target < rate(hi):
        raise ValueError("cannot bracket the Weibull scale for the requested event rate")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        r = rate(mid)
        if abs(r - target) <= RATE_TOL:
            return math.exp(mid)
        lo, hi = (mid, hi) if r < target else (lo, mid)
    raise ValueError("Weibull scale bisection did not reach the event-rate tolerance")


def _calibration_key(scenario: Scenario):
    keep = ("rho_aastar", "beta3", "beta4", "event_rate_target", "censor_rate", "t_star", "weibull_shape",
            "error_dist", "skew_shape", "te_target", "mp_target")
    return tuple((k, getattr(scenario, k)) for k in keep)


def calibrate_weibull_scale(scenario: Scenario, betas: tuple[float, float]) -> float:
    """Bisection on the Weibull scale ``v`` to hit the target cumulative event rate (+-0.2 points)."""
    return _calibrate_cached(_calibration_key(scenario), tuple(float(b) for b in betas))


def generate_study(scenario: Scenario, betas, v: float, rng: np.random.Generator,
                   n1: int | None = None, n2: int | None = None) -> Study:
    """Draw one main study (with latent true exposure) and one validation study."""
    n1 = scenario.n1 if n1 is None else n1
    n2 = scenario.n2 if n2 is None else n2
    n = n1 + n2
    M, A, W, astar, U, C = _draw(n, scenario, rng)
    Tt = _failure_times(U, _lp(betas, scenario, A, M, W), v, scenario.weibull_shape)
    T = np.minimum(np.minimum(Tt, C), scenario.t_star)
    delta = (Tt <= np.minimum(C, scenario.t_star)).astype(float)
    m, s = slice(0, n1), slice(n1, n)
    main = MainData(T[m], delta[m], M[m], astar[m], W[m, None], exposure_true=A[m])
    val = ValidationData(T[s], M[s], astar[s], A[s], W[s, None])
    return Study(main, val, ("w",), scenario.t_star)


def true_cumhaz(scenario: Scenario, v: float, t) -> np.ndarray:
    return (v * np.asarray(t, dtype=float)) ** scenario.weibull_shape


def replicate_rng(seed: int, r: int) -> np.random.Generator:
    """Independent stream for replicate ``r``; identical under any worker count."""
    return np.random.default_rng(np.random.SeedSequence([seed, r]))


@dataclass
class ScenarioResult:
    scenario: Scenario
    truth: dict
    rows: list[dict]
    estimates: dict = field(default_factory=dict)
    exact_rows: list[dict] = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    weibull_scale: float = float("nan")
    realized_event_rate: float = float("nan")

    def row(self, method: str, measure: str) -> dict:
        for r in self.rows:
            if r["method"] == method and r["measure"] == measure:
                return r
        raise KeyError((method, measure))

    def to_csv(self, path) -> None:
        keys = ["method", "measure", "true", "percent_bias", "se_x100", "coverage_v1", "coverage_v2", "n_ok"]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(r.get(k)) for k in keys})

    def to_dict(self) -> dict:
        sc = asdict(self.scenario)
        return {
            "scenario": sc,
            "truth": self.truth,
            "weibull_scale": self.weibull_scale,
            "realized_event_rate": self.realized_event_rate,
            "failures": self.failures,
            "rows": self.rows,
            "exact_rows": self.exact_rows,
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(_jsonable(self.to_dict()), indent=2), encoding="utf-8")


def _fmt(x):
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return x


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


MEASURE_NAMES = ("nie", "nde", "te", "mp")


def _method_specs(scenario: Scenario) -> list[tuple[str, str, int]]:
    labels = {"unadjusted": "U", "gold": "G", "orc1": "O1", "orc2": "O2", "rrc": "R"}
    specs = [(labels[m], m, scenario.k_rrc) for m in scenario.methods]
    for k in scenario.k_sweep:
        if "rrc" in scenario.methods and k == scenario.k_rrc:
            continue
        specs.append((f"R{k}", "rrc", k))
    return specs


def _one_replicate(args):
    scenario, betas, v, r = args
    rng = replicate_rng(scenario.seed, r)
    study = generate_study(scenario, betas, v, rng)
    contrast = Contrast(1.0, 0.0, (0.0,))
    out = {"event_rate": float(study.main.event.mean())}
    for label, method, k in _method_specs(scenario):
        rec = {"est": np.full(4, np.nan), "lo": np.full(4, np.nan), "hi": np.full(4, np.nan),
               "blo": np.full(4, np.nan), "bhi": np.full(4, np.nan), "exact": None, "ok": False}
        try:
            fit = fit_method(study, method, k=k)
            theta = Theta(fit.med, fit.out)
            rec["est"] = approx_measures(theta, contrast).as_array()
            if scenario.sandwich:
                ve = sandwich_variance(study, method, contrast, k=k, fit=fit)
                rec["lo"] = np.array([ve.ci_low[m] for m in MEASURE_NAMES])
                rec["hi"] = np.array([ve.ci_high[m] for m in MEASURE_NAMES])
            if scenario.bootstrap_b:
                bs = bootstrap_ci(study, method, scenario.bootstrap_b, scenario.seed * 7919 + r, contrast, k=k)
                rec["blo"] = np.array([bs.percentile.ci_low[m] for m in MEASURE_NAMES])
                rec["bhi"] = np.array([bs.percentile.ci_high[m] for m in MEASURE_NAMES])
            if scenario.exact_times:
                m_a = fit.predictor.impute(study.main)
                Z = outcome_design(study.main, m_a, fit.out.include_interaction)
                bh = breslow_cumhaz(fit.out.cox, study.main.time, study.main.event, Z)
                rec["exact"] = np.array([exact_measures(theta, bh, contrast, t).as_array()
                                         for t in scenario.exact_times])
            rec["ok"] = True
        except FIT_ERRORS as exc:
            log.info("replicate %d, method %s failed: %s", r, label, exc)
        out[label] = rec
    return out


def _summarise(values, lo, hi, blo, bhi, truth):
    ok = np.isfinite(values)
    vals = values[ok]
    pb = float(np.mean((vals - truth) / truth) * 100) if vals.size else float("nan")
    se = float(np.std(vals, ddof=1) * 100) if vals.size > 1 else float("nan")

    def cover(l, h):
        good = np.isfinite(l) & np.isfinite(h)
        if not good.any():
            return float("nan")
        return float(np.mean((l[good] <= truth) & (truth <= h[good])) * 100)

    return {"percent_bias": pb, "se_x100": se, "coverage_v1": cover(lo, hi), "coverage_v2": cover(blo, bhi),
            "n_ok": int(vals.size)}


def run_scenario(scenario: Scenario, n_jobs: int = 1, progress: bool = False) -> ScenarioResult:
    """Replicate: generate, fit every method, aggregate percent bias, SE and coverage."""
    theta = true_theta(scenario)
    betas = (theta.out.beta1, theta.out.beta2)
    v = calibrate_weibull_scale(scenario, betas)
    contrast = Contrast(1.0, 0.0, (0.0,))
    truth_vec = approx_measures(theta, contrast).as_array()
    truth = dict(zip(MEASURE_NAMES, map(float, truth_vec)))
    truth.update(beta1=betas[0], beta2=betas[1], beta3=scenario.beta3, beta4=scenario.beta4,
                 alpha1=theta.med.alpha1, sigma_alpha2=theta.med.sigma_alpha2,
                 gamma1=implied_error(scenario.rho_aastar).gamma1, rho=implied_rho(scenario.rho_aastar))

    jobs = [(scenario, betas, v, r) for r in range(scenario.replications)]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            reps = list(ex.map(_one_replicate, jobs, chunksize=max(1, len(jobs) // (8 * n_jobs))))
    else:
        reps = []
        for j in jobs:
            reps.append(_one_replicate(j))
            if progress and len(reps) % 50 == 0:
                log.warning("replicate %d / %d", len(reps), scenario.replications)

    specs = _method_specs(scenario)
    rows, estimates, failures = [], {}, {}
    R = scenario.replications
    for label, _, _ in specs:
        recs = [rep[label] for rep in reps]
        n_fail = sum(not rec["ok"] for rec in recs)
        failures[label] = n_fail
        if n_fail > MAX_FAILURE_RATE * R:
            raise RuntimeError(f"method {label}: {n_fail} of {R} replicates failed")
        est = np.array([rec["est"] for rec in recs])
        lo, hi = np.array([rec["lo"] for rec in recs]), np.array([rec["hi"] for rec in recs])
        blo, bhi = np.array([rec["blo"] for rec in recs]), np.array([rec["bhi"] for rec in recs])
        estimates[label] = est
        for j, name in enumerate(MEASURE_NAMES):
            row = {"method": label, "measure": name, "true": truth[name]}
            row.update(_summarise(est[:, j], lo[:, j], hi[:, j], blo[:, j], bhi[:, j], truth_vec[j]))
            rows.append(row)

    exact_rows = []
    if scenario.exact_times:
        lam = true_cumhaz(scenario, v, scenario.exact_times)
        true_exact = np.array([exact_measures(theta, float(l), contrast).as_array() for l in lam])
        for label, _, _ in specs:
            ex = [rep[label]["exact"] for rep in reps if rep[label]["exact"] is not None]
            if not ex:
                continue
            ex = np.array(ex)
            for ti, t in enumerate(scenario.exact_times):
                for j, name in enumerate(MEASURE_NAMES):
                    vals = ex[:, ti, j]
                    vals = vals[np.isfinite(vals)]
                    tv = true_exact[ti, j]
                    exact_rows.append({
                        "method": label, "measure": name, "t": float(t), "true": float(tv),
                        "mean_estimate": float(np.mean(vals)),
                        "percent_bias": float(np.mean((vals - tv) / tv) * 100),
                        "n_ok": int(vals.size),
                        "all_finite": bool(np.all(np.isfinite(ex[:, ti, j][:]))),
                    })

    rate = float(np.mean([rep["event_rate"] for rep in reps]))
    return ScenarioResult(scenario, truth, rows, estimates, exact_rows, failures, v, rate)
