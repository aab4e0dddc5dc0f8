"""Variance estimation for the mediation measures.

The sandwich treats the mediator and outcome parameters ``theta = (alpha, beta)``
as the target and the calibration parameters as nuisance blocks:

* ``gamma`` (error model) for ORC1, ORC2 and RRC,
* ``eta`` (ORC1 exposure regression) for ORC1,
* ``xi1 .. xiK`` (one risk-set regression per interval) for RRC.

Each subject's target score is corrected for the estimated nuisances,
``psi_i = U_theta,i + C_b A_b^{-1} U_b,i`` summed over blocks, where
``C_b = dU_theta/db`` and ``A_b = -dU_b/db``; then
``Var(theta_hat) = A_theta^{-1} (sum psi_i psi_i') A_theta^{-T}``. All Jacobians
are central finite differences of the summed estimating functions. The Cox
score enters the meat through its per-subject (Lin-Wei) contributions.

Matrices here are on the scale of ``Var(theta_hat)``; there is no separate
division by ``n``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import coxfit
from .calibrate import (
    CalibrationError,
    ErrParams,
    MedParams,
    MethodFit,
    fit_method,
    orc2_predictor,
    outcome_design,
)
from .coxfit import CoxFitError
from .dataio import Study
from .mediate import (
    Contrast,
    MediationMeasures,
    Theta,
    UndefinedMeasureError,
    approx_measures,
    approx_vector,
)
from .regress import SingularDesignError

log = logging.getLogger(__name__)

Z975 = 1.959963984540054
MEASURES = ("nie", "nde", "te", "mp")
FIT_ERRORS = (CoxFitError, CalibrationError, SingularDesignError, np.linalg.LinAlgError, FloatingPointError,
              UndefinedMeasureError)
MAX_FAILURE_RATE = 0.05


class BootstrapFailure(RuntimeError):
    pass


def fd_jacobian(f: Callable[[np.ndarray], np.ndarray], x, rel_step: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian with step ``rel_step * max(1, |x_j|)``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        cols.append((np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * h))
    return np.column_stack(cols)


class StackedSystem:
    """Per-subject estimating functions for one method fitted on one study.

    Subjects are indexed main study first (``0 .. n1-1``), then validation.
    Parameter blocks, in order: ``gamma``, then ``eta`` or ``xi1..xiK`` when
    applicable, then ``theta = [alpha0, alpha1, alpha2, sigma_alpha2, beta]``.
    """

    def __init__(self, study: Study, fit: MethodFit):
        self.study = study
        self.fit = fit
        self.method = fit.method
        self.include_interaction = fit.out.include_interaction
        self.p = study.p
        self.n1, self.n2 = study.n1, study.n2
        self.n = self.n1 + self.n2
        self.theta = fit.theta
        self.n_alpha = self.p + 3

        m, v = study.main, study.validation
        self._order = np.argsort(m.time, kind="stable")
        self._t = np.ascontiguousarray(m.time[self._order])
        self._d = np.ascontiguousarray(m.event[self._order])
        self._xv_err = np.column_stack([np.ones(self.n2), v.exposure_star, v.covariates])
        self._xv_orc = np.column_stack([np.ones(self.n2), v.exposure_star, v.mediator, v.covariates])
        self._xm_orc = np.column_stack([np.ones(self.n1), m.exposure_star, m.mediator, m.covariates])

        self.nuisance: dict[str, np.ndarray] = {}
        if self.method in ("orc1", "orc2", "rrc"):
            self.nuisance["gamma"] = fit.err.as_vector()
        if self.method == "orc1":
            self.nuisance["eta"] = np.asarray(fit.predictor.coefs, dtype=float)
        if self.method == "rrc":
            pred = fit.predictor
            self._interval = pred.interval_of(m.time)
            self._risk = [v.time >= tk for tk in pred.split_points]
            for k, coefs in enumerate(pred.per_interval):
                self.nuisance[f"xi{k + 1}"] = np.asarray(coefs, dtype=float)

    # ---- exposure imputation as a function of the parameters -------------
    def imputed_exposure(self, theta, nuis) -> np.ndarray:
        m = self.study.main
        if self.method == "unadjusted":
            return np.asarray(m.exposure_star)
        if self.method == "gold":
            return np.asarray(m.exposure_true)
        if self.method == "orc1":
            return self._xm_orc @ nuis["eta"]
        if self.method == "orc2":
            med = MedParams.from_vector(theta[: self.n_alpha])
            err = ErrParams.from_vector(nuis["gamma"])
            return self._xm_orc @ orc2_predictor(med, err).coefs
        coefs = np.array([nuis[f"xi{k + 1}"] for k in range(len(self._risk))])
        return np.einsum("ij,ij->i", self._xm_orc, coefs[self._interval])

    # ---- mediator block --------------------------------------------------
    def _alpha_scores(self, alpha, gamma) -> np.ndarray:
        m, v = self.study.main, self.study.validation
        coef, s2 = alpha[:-1], alpha[-1]
        out = np.zeros((self.n, self.n_alpha))
        if self.method in ("unadjusted", "gold"):
            if self.method == "unadjusted":
                a = np.concatenate([m.exposure_star, v.exposure_star])
            else:
                a = np.concatenate([m.exposure_true, v.exposure])
            x = np.column_stack([np.ones(self.n), a, np.vstack([m.covariates, v.covariates])])
            e = np.concatenate([m.mediator, v.mediator]) - x @ coef
            out[:, :-1] = x * e[:, None]
            out[:, -1] = s2 - e**2
            return out
        g = ErrParams.from_vector(gamma)
        mu = g.mean_exposure(m.exposure_star, m.covariates)
        xm = np.column_stack([np.ones(self.n1), mu, m.covariates])
        em = m.mediator - xm @ coef
        out[: self.n1, :-1] = xm * em[:, None]
        out[: self.n1, -1] = s2 + coef[1] ** 2 * g.sigma_gamma2 - em**2
        xv = np.column_stack([np.ones(self.n2), v.exposure, v.covariates])
        ev = v.mediator - xv @ coef
        out[self.n1 :, :-1] = xv * ev[:, None]
        out[self.n1 :, -1] = s2 - ev**2
        return out

    # ---- outcome block ---------------------------------------------------
    def _design(self, theta, nuis) -> np.ndarray:
        m_a = self.imputed_exposure(theta, nuis)
        return outcome_design(self.study.main, m_a, self.include_interaction)

    def _beta_total(self, theta, nuis) -> np.ndarray:
        Z = np.ascontiguousarray(self._design(theta, nuis)[self._order])
        beta = np.ascontiguousarray(theta[self.n_alpha :])
        return coxfit.sweep_sorted(self._t, self._d, Z, beta)[1]

    def theta_total(self, theta, nuis) -> np.ndarray:
        alpha = theta[: self.n_alpha]
        ua = self._alpha_scores(alpha, nuis.get("gamma")).sum(axis=0)
        return np.concatenate([ua, self._beta_total(theta, nuis)])

    def theta_scores(self) -> np.ndarray:
        """Per-subject target scores at the estimates, shape ``(n, dim theta)``."""
        theta, nuis = self.theta, self.nuisance
        ua = self._alpha_scores(theta[: self.n_alpha], nuis.get("gamma"))
        Z = self._design(theta, nuis)
        m = self.study.main
        ub = np.zeros((self.n, Z.shape[1]))
        ub[: self.n1] = coxfit.score_residuals(m.time, m.event, Z, theta[self.n_alpha :])
        return np.hstack([ua, ub])

    # ---- nuisance blocks -------------------------------------------------
    def nuisance_scores(self, name: str, vec) -> np.ndarray:
        v = self.study.validation
        vec = np.asarray(vec, dtype=float)
        if name == "gamma":
            x = self._xv_err
            e = v.exposure - x @ vec[:-1]
            val = np.column_stack([x * e[:, None], vec[-1] - e**2])
        else:
            x = self._xv_orc
            e = v.exposure - x @ vec
            val = x * e[:, None]
            if name.startswith("xi"):
                val = val * self._risk[int(name[2:]) - 1][:, None]
        out = np.zeros((self.n, val.shape[1]))
        out[self.n1 :] = val
        return out

    @property
    def param_names(self) -> list[str]:
        cov = list(self.study.covariate_names)
        alpha = ["alpha0", "alpha1", *[f"alpha2[{c}]" for c in cov], "sigma_alpha2"]
        beta = ["beta1", "beta2", *(["beta3"] if self.include_interaction else []), *[f"beta4[{c}]" for c in cov]]
        return alpha + beta


def stacked_system(study: Study, method: str, k: int = 4, include_interaction: bool = True,
                   fit: MethodFit | None = None) -> StackedSystem:
    if fit is None:
        fit = fit_method(study, method, k=k, include_interaction=include_interaction)
    return StackedSystem(study, fit)


def sandwich_theta(system: StackedSystem, omit: Iterable[str] = ()) -> np.ndarray:
    """Sandwich ``Var(theta_hat)`` with nuisance corrections; blocks in ``omit`` are left out."""
    theta, nuis = system.theta, system.nuisance
    omit = set(omit)
    A_theta = -fd_jacobian(lambda th: system.theta_total(th, nuis), theta)
    psi = system.theta_scores()
    for name, vec in nuis.items():
        if name in omit or (name.startswith("xi") and "xi" in omit):
            continue

        def total_b(b, name=name):
            return system.theta_total(theta, {**nuis, name: b})

        C = fd_jacobian(total_b, vec)
        A_b = -fd_jacobian(lambda b, name=name: system.nuisance_scores(name, b).sum(axis=0), vec)
        U_b = system.nuisance_scores(name, vec)
        psi = psi + U_b @ np.linalg.solve(A_b, C.T)
    try:
        A_inv = np.linalg.inv(A_theta)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular bread matrix in sandwich variance") from exc
    V = A_inv @ (psi.T @ psi) @ A_inv.T
    return 0.5 * (V + V.T)


def full_stack_theta(system: StackedSystem) -> np.ndarray:
    """Same variance from one fully stacked M-estimator over all parameters.

    Used as an independent check of the block-corrected construction.
    """
    names = list(system.nuisance)
    sizes = [system.nuisance[n].size for n in names]
    d_t = system.theta.size
    x0 = np.concatenate([*(system.nuisance[n] for n in names), system.theta])
    cuts = np.cumsum([0, *sizes])

    def split(x):
        nuis = {n: x[cuts[i] : cuts[i + 1]] for i, n in enumerate(names)}
        return nuis, x[cuts[-1] :]

    def total(x):
        nuis, th = split(x)
        parts = [system.nuisance_scores(n, nuis[n]).sum(axis=0) for n in names]
        return np.concatenate([*parts, system.theta_total(th, nuis)])

    A = -fd_jacobian(total, x0)
    U = np.hstack([*(system.nuisance_scores(n, system.nuisance[n]) for n in names), system.theta_scores()])
    A_inv = np.linalg.inv(A)
    V = A_inv @ (U.T @ U) @ A_inv.T
    V = V[-d_t:, -d_t:]
    return 0.5 * (V + V.T)


@dataclass
class VarianceEstimate:
    v_theta: np.ndarray | None
    point: MediationMeasures | None = None
    measure_se: dict = field(default_factory=dict)
    ci_low: dict = field(default_factory=dict)
    ci_high: dict = field(default_factory=dict)
    kind: str = "sandwich"
    names: list = field(default_factory=list)


def measure_gradient(theta_vec, p: int, c: Contrast, measure: str, include_interaction: bool = True) -> np.ndarray:
    j = MEASURES.index(measure.lower())
    return fd_jacobian(lambda th: approx_vector(th, p, c, include_interaction)[j : j + 1], theta_vec)[0]


def delta_method_se(theta: Theta | np.ndarray, v_theta: np.ndarray, c: Contrast, measure: str,
                    p: int | None = None, include_interaction: bool = True) -> float:
    """Delta-method standard error of an approximate mediation measure."""
    if isinstance(theta, Theta):
        include_interaction = theta.out.include_interaction
        p = np.atleast_1d(theta.med.alpha2).size
        vec = theta.as_vector()
    else:
        vec = np.asarray(theta, dtype=float)
        if p is None:
            raise ValueError("p is required with a raw parameter vector")
    point = approx_measures(Theta.from_vector(vec, p, include_interaction), c)
    if measure.lower() == "mp" and not point.mp_defined:
        raise UndefinedMeasureError("MP is undefined because TE is zero")
    g = measure_gradient(vec, p, c, measure, include_interaction)
    return float(np.sqrt(max(g @ v_theta @ g, 0.0)))


def _wald(point: MediationMeasures, se: dict, mp_scale: str = "raw"):
    lo, hi = {}, {}
    for name, s in se.items():
        est = getattr(point, name)
        if est is None or not np.isfinite(s):
            lo[name] = hi[name] = float("nan")
            continue
        if name == "mp" and mp_scale == "logit" and 0 < est < 1:
            lg, s_lg = np.log(est / (1 - est)), s / (est * (1 - est))
            lo[name] = float(1 / (1 + np.exp(-(lg - Z975 * s_lg))))
            hi[name] = float(1 / (1 + np.exp(-(lg + Z975 * s_lg))))
        else:
            lo[name], hi[name] = est - Z975 * s, est + Z975 * s
    return lo, hi


def sandwich_variance(study: Study, method: str, contrast: Contrast | None = None, k: int = 4,
                      include_interaction: bool = True, fit: MethodFit | None = None,
                      omit: Iterable[str] = (), mp_scale: str = "raw") -> VarianceEstimate:
    """Sandwich ``Var(theta_hat)`` and, given a contrast, delta-method SEs and Wald CIs."""
    system = stacked_system(study, method, k, include_interaction, fit)
    V = sandwich_theta(system, omit)
    if np.linalg.eigvalsh(V).min() < -1e-10 * max(1.0, np.abs(V).max()):
        log.warning("sandwich variance is not positive semi-definite")
    est = VarianceEstimate(V, names=system.param_names)
    if contrast is not None:
        theta = Theta(system.fit.med, system.fit.out)
        est.point = approx_measures(theta, contrast)
        for name in MEASURES:
            try:
                est.measure_se[name] = delta_method_se(system.theta, V, contrast, name, study.p, include_interaction)
            except UndefinedMeasureError:
                est.measure_se[name] = float("nan")
        est.ci_low, est.ci_high = _wald(est.point, est.measure_se, mp_scale)
    return est


@dataclass
class BootstrapResult:
    point: MediationMeasures
    replicates: np.ndarray
    n_failed: int
    wald: VarianceEstimate
    percentile: VarianceEstimate


def _bootstrap_one(args):
    study, method, k, include_interaction, contrast, seed_seq = args
    rng = np.random.default_rng(seed_seq)
    try:
        boot = study.resample(rng)
        fit = fit_method(boot, method, k=k, include_interaction=include_interaction)
        return approx_measures(Theta(fit.med, fit.out), contrast).as_array()
    except FIT_ERRORS as exc:
        log.debug("bootstrap replicate failed: %s", exc)
        return None


def bootstrap_ci(study: Study, method: str, b: int, seed: int, c: Contrast, k: int = 4,
                 include_interaction: bool = True, n_jobs: int = 1, min_b: int = 100) -> BootstrapResult:
    """Nonparametric bootstrap resampling main and validation subjects separately.

    Replicate ``i`` draws from its own child of ``SeedSequence(seed)``, so the
    result does not depend on ``n_jobs``. Failed replicates are dropped and
    counted; more than 5% failures raises :class:`BootstrapFailure`.
    """
    if b < min_b:
        raise ValueError(f"need at least {min_b} bootstrap replicates")
    try:
        fit = fit_method(study, method, k=k, include_interaction=include_interaction)
    except FIT_ERRORS as exc:
        raise BootstrapFailure(f"point estimate failed: {exc}") from exc
    point = approx_measures(Theta(fit.med, fit.out), c)
    children = np.random.SeedSequence(seed).spawn(b)
    jobs = [(study, method, k, include_interaction, c, s) for s in children]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as ex:
            results = list(ex.map(_bootstrap_one, jobs, chunksize=max(1, b // (4 * n_jobs))))
    else:
        results = [_bootstrap_one(j) for j in jobs]
    ok = [r for r in results if r is not None]
    n_failed = b - len(ok)
    if n_failed > MAX_FAILURE_RATE * b:
        raise BootstrapFailure(f"{n_failed} of {b} bootstrap replicates failed")
    reps = np.array(ok)
    se = {name: float(np.nanstd(reps[:, j], ddof=1)) for j, name in enumerate(MEASURES)}
    wald = VarianceEstimate(None, point, se, kind="bootstrap-wald")
    wald.ci_low, wald.ci_high = _wald(point, se)
    pct = VarianceEstimate(None, point, dict(se), kind="bootstrap-percentile")
    for j, name in enumerate(MEASURES):
        col = reps[:, j][np.isfinite(reps[:, j])]
        pct.ci_low[name], pct.ci_high[name] = (float(x) for x in np.percentile(col, [2.5, 97.5]))
    return BootstrapResult(point, reps, n_failed, wald, pct)
