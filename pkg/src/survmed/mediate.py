"""Mediation measures on the log-hazard-ratio scale and bias diagnostics.

Two evaluation paths are provided. :func:`approx_measures` uses the closed
forms valid when the cumulative baseline hazard is near zero (rare outcome).
:func:`exact_measures` integrates the counterfactual hazard over the mediator
distribution with Gauss-Hermite quadrature at a given time ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from .calibrate import MedParams, OutParams
from .coxfit import BaselineHazard, cumhaz_at

MP_TE_FLOOR = 1e-12
DEFAULT_QUAD_ORDER = 40


class UndefinedMeasureError(ArithmeticError):
    """A ratio measure is requested where its denominator vanishes."""


@dataclass(frozen=True)
class Theta:
    med: MedParams
    out: OutParams

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.med.as_vector(), self.out.as_vector()])

    @classmethod
    def from_vector(cls, v, p: int, include_interaction: bool = True) -> "Theta":
        v = np.asarray(v, dtype=float)
        return cls(MedParams.from_vector(v[: p + 3]), OutParams.from_vector(v[p + 3 :], include_interaction))


@dataclass(frozen=True)
class Contrast:
    """Exposure change ``a_star -> a`` at covariate profile ``w``."""

    a: float
    a_star: float
    w: np.ndarray | tuple = ()

    def w_vec(self, p: int) -> np.ndarray:
        w = np.asarray(self.w, dtype=float).reshape(-1)
        if w.size == 0:
            return np.zeros(p)
        if w.size != p:
            raise ValueError(f"contrast profile has {w.size} covariates, model has {p}")
        return w


@dataclass(frozen=True)
class MediationMeasures:
    """NIE, NDE and TE (log hazard ratios) and MP = NIE/TE.

    ``mp`` is ``None`` when ``|te|`` is below 1e-12; :attr:`mp_defined` reports it.
    """

    nie: float
    nde: float
    te: float
    mp: float | None

    @property
    def mp_defined(self) -> bool:
        return self.mp is not None

    def as_array(self) -> np.ndarray:
        """``[nie, nde, te, mp]`` with an undefined MP encoded as NaN (aggregation only)."""
        return np.array([self.nie, self.nde, self.te, np.nan if self.mp is None else self.mp])

    def get(self, name: str) -> float:
        val = getattr(self, name.lower())
        if val is None:
            raise UndefinedMeasureError("MP is undefined because TE is zero")
        return val


def _measures(nie: float, nde: float) -> MediationMeasures:
    te = nie + nde
    mp = nie / te if abs(te) >= MP_TE_FLOOR else None
    return MediationMeasures(float(nie), float(nde), float(te), mp)


def approx_measures(theta: Theta, c: Contrast) -> MediationMeasures:
    """Rare-outcome closed forms, constant in time.

    ``NIE = (b2 + b3 a) a1 (a - a*)`` and
    ``NDE = {b1 + b3 (a0 + a1 a* + a2'w + b2 s2)} (a - a*) + 0.5 b3^2 s2 (a^2 - a*^2)``.
    """
    med, out = theta.med, theta.out
    a, a_s = c.a, c.a_star
    w = c.w_vec(np.atleast_1d(med.alpha2).size)
    s2 = med.sigma_alpha2
    mu_star = med.alpha0 + med.alpha1 * a_s + float(np.dot(med.alpha2, w))
    nie = (out.beta2 + out.beta3 * a) * med.alpha1 * (a - a_s)
    nde = (out.beta1 + out.beta3 * (mu_star + out.beta2 * s2)) * (a - a_s) + 0.5 * out.beta3**2 * s2 * (a**2 - a_s**2)
    return _measures(nie, nde)


def approx_vector(theta_vec, p: int, c: Contrast, include_interaction: bool = True) -> np.ndarray:
    """``[nie, nde, te, mp]`` as a flat array of a stacked parameter vector."""
    return approx_measures(Theta.from_vector(theta_vec, p, include_interaction), c).as_array()


def _log_gauss_mean_survival(log_lam: float, lin: float, slope: float, mu: float, sd: float,
                             nodes: np.ndarray, logw: np.ndarray) -> float:
    """``log E[exp(-Lambda exp(lin + slope m))]`` for ``m ~ N(mu, sd^2)``.

    Evaluated entirely in log space: the integrand's log is ``-exp(log Lambda + ...)``
    and the Gauss-Hermite sum is a log-sum-exp, so large exponents underflow
    node-by-node instead of producing infinities.
    """
    m = mu + np.sqrt(2.0) * sd * nodes
    with np.errstate(over="ignore"):
        log_f = -np.exp(log_lam + lin + slope * m)
    out = logsumexp(logw + log_f)
    if not np.isfinite(out):
        raise FloatingPointError("survival integrand underflows at every quadrature node")
    return float(out)


def _delta(theta: Theta, log_lam: float, a: float, a_s: float, w: np.ndarray,
           nodes: np.ndarray, logw: np.ndarray) -> float:
    med, out = theta.med, theta.out
    s2 = med.sigma_alpha2
    sd = np.sqrt(max(s2, 0.0))
    slope = out.beta2 + out.beta3 * a
    mu = med.alpha0 + med.alpha1 * a_s + float(np.dot(med.alpha2, w))
    lin = out.beta1 * a + float(np.dot(out.beta4, w))
    base = lin + slope * mu + 0.5 * slope**2 * s2
    if not np.isfinite(log_lam):
        return base
    # completing the square shifts the mediator mean by slope*s2, i.e. a factor exp(slope^2 s2)
    num = _log_gauss_mean_survival(log_lam, lin + slope**2 * s2, slope, mu, sd, nodes, logw)
    den = _log_gauss_mean_survival(log_lam, lin, slope, mu, sd, nodes, logw)
    return (num - den) + base


def exact_measures(theta: Theta, bh: BaselineHazard | float, c: Contrast, t: float | None = None,
                   quad_order: int = DEFAULT_QUAD_ORDER) -> MediationMeasures:
    """Mediation measures at time ``t`` without the rare-outcome approximation.

    ``bh`` is either a fitted :class:`BaselineHazard` (evaluated at ``t``) or a
    cumulative baseline hazard value ``Lambda_0(t)`` directly.
    """
    if quad_order < 10:
        raise ValueError("quad_order must be at least 10")
    if isinstance(bh, BaselineHazard):
        if t is None:
            raise ValueError("t is required with a BaselineHazard")
        lam = cumhaz_at(bh, t)
    else:
        lam = float(bh)
    if lam < 0:
        raise ValueError("cumulative hazard must be non-negative")
    x, wts = np.polynomial.hermite.hermgauss(quad_order)
    logw = np.log(wts) - 0.5 * np.log(np.pi)
    log_lam = np.log(lam) if lam > 0 else -np.inf
    w = c.w_vec(np.atleast_1d(theta.med.alpha2).size)
    a, a_s = c.a, c.a_star
    d_aa = _delta(theta, log_lam, a, a, w, x, logw)
    d_as = _delta(theta, log_lam, a, a_s, w, x, logw)
    d_ss = _delta(theta, log_lam, a_s, a_s, w, x, logw)
    return _measures(d_aa - d_as, d_as - d_ss)


def exact_measures_grid(theta: Theta, bh: BaselineHazard, c: Contrast, times: Sequence[float],
                        quad_order: int = DEFAULT_QUAD_ORDER) -> list[MediationMeasures]:
    return [exact_measures(theta, bh, c, t, quad_order) for t in times]


class RelBias(NamedTuple):
    nie: float
    nde: float
    te: float
    mp: float


def theorem1_relbias(gamma1: float, rho: float, mp_true: float) -> RelBias:
    """Approximate asymptotic relative bias of the unadjusted estimators.

    Valid for a rare outcome, no exposure-mediator interaction and a normal,
    homoskedastic calibration error.
    """
    if not 0.0 < mp_true < 1.0:
        raise ValueError("mp_true must lie in (0, 1)")
    odds = 1.0 / mp_true - 1.0
    return RelBias(
        nie=gamma1 - 1.0 + gamma1 * rho * odds,
        nde=(gamma1 - 1.0) * (1.0 - rho) - rho,
        te=gamma1 - 1.0,
        mp=rho * odds,
    )


def reliability_index(alpha1: float, sigma_alpha2: float, sigma_gamma2: float) -> float:
    """MP reliability index ``s_g^2 / (s_g^2 + s_a^2 / a1^2)``; zero when ``a1 == 0``."""
    if alpha1 == 0:
        return 0.0
    num = alpha1**2 * sigma_gamma2
    den = num + sigma_alpha2
    if den == 0:
        raise ValueError("reliability index undefined: both variances are zero")
    return num / den


def reliability_index_nocov(rho_aastar: float, rho_am: float) -> float:
    """Reliability index without covariates, from the two correlations. Lies in ``[0, rho_am^2]``."""
    if rho_am == 0:
        raise ValueError("rho_am must be non-zero")
    if not -1.0 <= rho_aastar <= 1.0 or not -1.0 < rho_am < 1.0:
        raise ValueError("correlations out of range")
    return (1.0 - rho_aastar**2) / (1.0 / rho_am**2 - rho_aastar**2)
