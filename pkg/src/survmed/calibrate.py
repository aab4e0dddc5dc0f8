"""Measurement-error and mediator models, exposure predictors, and the outcome fit.

Five ways of filling in the exposure column of the Cox model are supported:

``unadjusted``  the surrogate ``A*`` as recorded
``gold``        the true exposure (simulated main studies only)
``orc1``        OLS of ``A`` on ``(1, A*, M, W)`` in the validation study
``orc2``        closed-form ``E[A | A*, M, W]`` from the error and mediator models
``rrc``         ORC1-type regressions refitted on validation risk sets at K split times
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .coxfit import CoxFit, cox_fit
from .dataio import MainData, MainRecord, Study
from .regress import LinearFit, SingularDesignError, ols_fit

METHODS = ("unadjusted", "gold", "orc1", "orc2", "rrc")
METHOD_LABELS = {"unadjusted": "U", "gold": "G", "orc1": "O1", "orc2": "O2", "rrc": "R"}
SKEW_WARN = 1.0


class CalibrationError(ValueError):
    """A calibration regression cannot be fitted on the available rows."""


@dataclass(frozen=True)
class ErrParams:
    """Coefficients of ``A = g0 + g1 A* + g2'W + e``, ``Var(e) = sigma_gamma2``."""

    gamma0: float
    gamma1: float
    gamma2: np.ndarray
    sigma_gamma2: float
    fit: LinearFit | None = field(default=None, compare=False, repr=False)
    residuals: np.ndarray | None = field(default=None, compare=False, repr=False)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.gamma0, self.gamma1], self.gamma2, [self.sigma_gamma2]])

    @classmethod
    def from_vector(cls, v) -> "ErrParams":
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), float(v[1]), v[2:-1].copy(), float(v[-1]))

    def mean_exposure(self, astar, W) -> np.ndarray:
        return self.gamma0 + self.gamma1 * np.asarray(astar) + np.asarray(W) @ self.gamma2


@dataclass(frozen=True)
class MedParams:
    """Coefficients of ``M = a0 + a1 A + a2'W + e``, ``Var(e) = sigma_alpha2``."""

    alpha0: float
    alpha1: float
    alpha2: np.ndarray
    sigma_alpha2: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.alpha0, self.alpha1], np.atleast_1d(self.alpha2), [self.sigma_alpha2]])

    @classmethod
    def from_vector(cls, v) -> "MedParams":
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), float(v[1]), v[2:-1].copy(), float(v[-1]))


@dataclass(frozen=True)
class OrcPredictor:
    """Linear predictor ``c0 + c1 A* + c2 M + c3'W`` of the true exposure."""

    kind: str
    coefs: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.coefs)):
            raise CalibrationError(f"{self.kind} predictor has non-finite coefficients")

    def impute(self, main: MainData) -> np.ndarray:
        return _linear(self.coefs, main.exposure_star, main.mediator, main.covariates)


@dataclass(frozen=True)
class RrcPredictor:
    """Risk-set calibration: one coefficient vector per interval ``[t_k, t_{k+1})``."""

    split_points: np.ndarray
    per_interval: np.ndarray
    min_risk_size: int
    risk_sizes: tuple[int, ...] = ()
    kind: str = "rrc"

    @property
    def k(self) -> int:
        return len(self.split_points)

    def interval_of(self, t) -> np.ndarray:
        # closed-left intervals: a time equal to t_k belongs to interval k
        idx = np.searchsorted(self.split_points, np.asarray(t, dtype=float), side="right") - 1
        return np.clip(idx, 0, self.k - 1)

    def impute(self, main: MainData) -> np.ndarray:
        coefs = self.per_interval[self.interval_of(main.time)]
        X = _regressors(main.exposure_star, main.mediator, main.covariates)
        return np.einsum("ij,ij->i", X, coefs)


@dataclass(frozen=True)
class SimplePredictor:
    """``unadjusted`` (uses A*) or ``gold`` (uses the simulator's true A)."""

    kind: str

    def impute(self, main: MainData) -> np.ndarray:
        if self.kind == "unadjusted":
            return np.asarray(main.exposure_star)
        if main.exposure_true is None:
            raise CalibrationError("gold-standard fit needs the true exposure in the main study")
        return np.asarray(main.exposure_true)


@dataclass(frozen=True)
class OutParams:
    beta1: float
    beta2: float
    beta3: float
    beta4: np.ndarray
    info: np.ndarray
    include_interaction: bool = True
    cox: CoxFit | None = field(default=None, compare=False, repr=False)

    def as_vector(self) -> np.ndarray:
        head = [self.beta1, self.beta2, self.beta3] if self.include_interaction else [self.beta1, self.beta2]
        return np.concatenate([head, np.atleast_1d(self.beta4)])

    @classmethod
    def from_vector(cls, v, include_interaction: bool = True, info=None) -> "OutParams":
        v = np.asarray(v, dtype=float)
        if include_interaction:
            b1, b2, b3, b4 = v[0], v[1], v[2], v[3:]
        else:
            b1, b2, b3, b4 = v[0], v[1], 0.0, v[2:]
        info = np.full((v.size, v.size), np.nan) if info is None else info
        return cls(float(b1), float(b2), float(b3), b4.copy(), info, include_interaction)


def _regressors(astar, m, W) -> np.ndarray:
    astar = np.asarray(astar, dtype=float)
    return np.column_stack([np.ones_like(astar), astar, np.asarray(m, dtype=float), np.asarray(W, dtype=float)])


def _linear(coefs, astar, m, W) -> np.ndarray:
    return _regressors(astar, m, W) @ coefs


def _names(study: Study, *lead: str) -> list[str]:
    return ["intercept", *lead, *study.covariate_names]


def fit_error_model(study: Study) -> ErrParams:
    """OLS of the true exposure on ``(1, A*, W)`` in the validation study."""
    v = study.validation
    if study.n2 < study.p + 3:
        raise CalibrationError(f"validation study has {study.n2} rows; need at least {study.p + 3}")
    X = np.column_stack([np.ones(study.n2), v.exposure_star, v.covariates])
    fit = ols_fit(X, v.exposure, _names(study, "exposure_star"))
    c = fit.coefs
    resid = v.exposure - X @ c
    return ErrParams(float(c[0]), float(c[1]), c[2:].copy(), fit.resid_var, fit=fit, residuals=resid)


def residual_diagnostics(residuals) -> dict:
    """Skewness and excess kurtosis of calibration residuals, with a normality flag."""
    r = np.asarray(residuals, dtype=float)
    if r.size < 3 or np.allclose(r, r[0]):
        return {"skewness": 0.0, "excess_kurtosis": 0.0, "skew_flag": False}
    skew = float(stats.skew(r))
    kurt = float(stats.kurtosis(r))
    return {"skewness": skew, "excess_kurtosis": kurt, "skew_flag": abs(skew) > SKEW_WARN}


def fit_mediator(study: Study, err: ErrParams) -> MedParams:
    """Pooled mediator regression using the calibrated exposure for main-study rows.

    Main rows use ``E[A | A*, W]`` from the error model, validation rows use the
    true exposure. The residual variance is corrected by ``(n1/n) a1^2 s_gamma^2``.
    """
    m, v = study.main, study.validation
    n1, n2 = study.n1, study.n2
    n = n1 + n2
    if n < study.p + 3:
        raise CalibrationError(f"{n} pooled rows for {study.p + 3} mediator coefficients")
    a_hat = np.concatenate([err.mean_exposure(m.exposure_star, m.covariates), v.exposure])
    W = np.vstack([m.covariates, v.covariates])
    M = np.concatenate([m.mediator, v.mediator])
    X = np.column_stack([np.ones(n), a_hat, W])
    fit = ols_fit(X, M, _names(study, "exposure"))
    c = fit.coefs
    s2 = fit.resid_var - (n1 / n) * c[1] ** 2 * err.sigma_gamma2
    if s2 < 0:
        warnings.warn(
            f"mediator residual variance corrected below zero ({s2:.4g}); clamped to 0. "
            "The validation study is probably too small.",
            RuntimeWarning,
            stacklevel=2,
        )
        s2 = 0.0
    return MedParams(float(c[0]), float(c[1]), c[2:].copy(), float(s2))


def fit_mediator_single(study: Study, exposure: str = "star") -> MedParams:
    """Pooled mediator OLS over main and validation rows on one exposure source.

    ``star`` regresses on ``A*`` in both studies (unadjusted); ``true`` on the
    true ``A`` in both (gold standard, needs the main-study true exposure).
    """
    m, v = study.main, study.validation
    if exposure == "star":
        a = np.concatenate([m.exposure_star, v.exposure_star])
    else:
        a = np.concatenate([SimplePredictor("gold").impute(m), v.exposure])
    n = study.n1 + study.n2
    X = np.column_stack([np.ones(n), a, np.vstack([m.covariates, v.covariates])])
    fit = ols_fit(X, np.concatenate([m.mediator, v.mediator]), _names(study, "exposure"))
    c = fit.coefs
    return MedParams(float(c[0]), float(c[1]), c[2:].copy(), fit.resid_var)


def orc1_fit(study: Study) -> OrcPredictor:
    """OLS of ``A`` on ``(1, A*, M, W)`` in the validation study."""
    v = study.validation
    if study.n2 < study.p + 4:
        raise CalibrationError(f"validation study has {study.n2} rows; need at least {study.p + 4}")
    X = _regressors(v.exposure_star, v.mediator, v.covariates)
    fit = ols_fit(X, v.exposure, _names(study, "exposure_star", "mediator"))
    return OrcPredictor("orc1", fit.coefs)


def orc2_predictor(med: MedParams, err: ErrParams) -> OrcPredictor:
    """Closed-form ``E[A | A*, M, W]`` under a normal error term (Bayes' rule)."""
    s_g, s_a, a1 = err.sigma_gamma2, med.sigma_alpha2, med.alpha1
    denom = a1**2 * s_g + s_a
    if not denom > 0:
        raise CalibrationError("alpha1^2 sigma_gamma^2 + sigma_alpha^2 must be positive")
    c0 = (err.gamma0 * s_a - med.alpha0 * a1 * s_g) / denom
    c1 = err.gamma1 * s_a / denom
    c2 = a1 * s_g / denom
    c3 = (s_a * np.asarray(err.gamma2) - a1 * s_g * np.asarray(med.alpha2)) / denom
    return OrcPredictor("orc2", np.concatenate([[c0, c1, c2], np.atleast_1d(c3)]))


def equal_split_points(t_v_star: float, k: int) -> np.ndarray:
    return np.arange(k) * (t_v_star / k)


def rrc_fit(study: Study, k: int = 4, split_points: Sequence[float] | None = None) -> RrcPredictor:
    """Refit the exposure regression on each validation risk set ``{T >= t_k}``.

    Split points default to ``t_k = (k-1) t_v* / K``. A risk set with fewer than
    ``p + 4`` rows is an error; intervals are never merged silently.
    """
    v = study.validation
    if split_points is None:
        if k < 1:
            raise CalibrationError("k must be at least 1")
        pts = equal_split_points(study.t_v_star, k)
    else:
        pts = np.asarray(split_points, dtype=float)
        if pts.size == 0 or pts[0] != 0 or np.any(np.diff(pts) <= 0):
            raise CalibrationError("split points must start at 0 and increase strictly")
    min_size = study.p + 4
    X = _regressors(v.exposure_star, v.mediator, v.covariates)
    names = _names(study, "exposure_star", "mediator")
    coefs, sizes = [], []
    for tk in pts:
        at_risk = v.time >= tk
        size = int(at_risk.sum())
        if size < min_size:
            raise CalibrationError(
                f"validation risk set at t_k={tk:g} has {size} members (< {min_size}); use a smaller K"
            )
        try:
            fit = ols_fit(X[at_risk], v.exposure[at_risk], names)
        except SingularDesignError as exc:
            raise CalibrationError(f"risk set at t_k={tk:g}: {exc}") from exc
        coefs.append(fit.coefs)
        sizes.append(size)
    return RrcPredictor(pts, np.array(coefs), min_size, tuple(sizes))


def select_k_cv(study: Study, k_max: int = 10) -> tuple[int, dict[int, float]]:
    """Leave-one-out choice of K for RRC on the validation study.

    Each validation subject is predicted from the fit on its own risk set with
    that subject removed (hat-matrix shortcut). Values of K whose risk sets are
    too small are skipped.
    """
    v = study.validation
    X = _regressors(v.exposure_star, v.mediator, v.covariates)
    scores: dict[int, float] = {}
    for k in range(1, k_max + 1):
        pts = equal_split_points(study.t_v_star, k)
        own = np.clip(np.searchsorted(pts, v.time, side="right") - 1, 0, k - 1)
        loo = np.empty(study.n2)
        try:
            for j, tk in enumerate(pts):
                rs = np.flatnonzero(v.time >= tk)
                if rs.size < study.p + 4:
                    raise CalibrationError("risk set too small")
                fit = ols_fit(X[rs], v.exposure[rs])
                mine = rs[own[rs] == j]
                if mine.size == 0:
                    continue
                h = np.einsum("ij,jk,ik->i", X[mine], fit.xtx_inv, X[mine])
                r = v.exposure[mine] - X[mine] @ fit.coefs
                loo[mine] = r / (1.0 - h)
        except (CalibrationError, SingularDesignError):
            continue
        scores[k] = float(np.mean(loo**2))
    if not scores:
        raise CalibrationError("no K in range has large enough risk sets")
    best = min(scores, key=scores.get)
    return best, scores


def impute_exposure(predictor, record: MainRecord) -> float:
    """Imputed exposure for a single main-study record."""
    main = MainData(
        [record.t_obs], [float(record.event)], [record.mediator], [record.exposure_star], [list(record.covariates)]
    )
    return float(predictor.impute(main)[0])


def outcome_design(main: MainData, m_a: np.ndarray, include_interaction: bool = True) -> np.ndarray:
    cols = [m_a, main.mediator]
    if include_interaction:
        cols.append(m_a * main.mediator)
    return np.column_stack([*cols, main.covariates])


def outcome_names(study: Study, include_interaction: bool = True) -> list[str]:
    head = ["exposure", "mediator"] + (["exposure:mediator"] if include_interaction else [])
    return head + list(study.covariate_names)


def fit_outcome(study: Study, predictor, include_interaction: bool = True) -> OutParams:
    """Cox model on the main study with the exposure column imputed by ``predictor``."""
    m = study.main
    if study.n1 == 0 or m.event.sum() == 0:
        from .coxfit import CoxFitError

        raise CoxFitError("main study has no events")
    m_a = predictor.impute(m)
    Z = outcome_design(m, m_a, include_interaction)
    fit = cox_fit(m.time, m.event, Z, names=outcome_names(study, include_interaction))
    b = fit.beta
    if include_interaction:
        b1, b2, b3, b4 = b[0], b[1], b[2], b[3:]
    else:
        b1, b2, b3, b4 = b[0], b[1], 0.0, b[2:]
    return OutParams(float(b1), float(b2), float(b3), b4.copy(), fit.info, include_interaction, cox=fit)


@dataclass(frozen=True)
class MethodFit:
    """Every fitted piece for one estimation method on one study."""

    method: str
    med: MedParams
    out: OutParams
    predictor: object
    err: ErrParams | None = None

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.med.as_vector(), self.out.as_vector()])


def fit_method(study: Study, method: str, k: int = 4, include_interaction: bool = True,
               split_points: Sequence[float] | None = None) -> MethodFit:
    """Fit the mediator and outcome models with one of the five exposure strategies."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if method in ("unadjusted", "gold"):
        med = fit_mediator_single(study, "star" if method == "unadjusted" else "true")
        pred = SimplePredictor(method)
        out = fit_outcome(study, pred, include_interaction)
        return MethodFit(method, med, out, pred)
    err = fit_error_model(study)
    med = fit_mediator(study, err)
    if method == "orc1":
        pred = orc1_fit(study)
    elif method == "orc2":
        pred = orc2_predictor(med, err)
    else:
        pred = rrc_fit(study, k, split_points)
    out = fit_outcome(study, pred, include_interaction)
    return MethodFit(method, med, out, pred, err)
