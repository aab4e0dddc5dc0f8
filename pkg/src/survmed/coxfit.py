"""Cox proportional hazards fitting with Breslow ties.

The partial-likelihood sweep comes from the compiled ``_coxkernel`` extension
when it is importable and from the numpy twin otherwise. Set
``SURVMED_PURE_PYTHON=1`` to force the numpy path.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _coxkernel_py

if os.environ.get("SURVMED_PURE_PYTHON", "") not in ("", "0"):
    _sweep = _coxkernel_py.cox_sweep
    BACKEND = "python"
else:
    try:
        from ._coxkernel import cox_sweep as _sweep

        BACKEND = "cython"
    except ImportError:  # extension not built
        _sweep = _coxkernel_py.cox_sweep
        BACKEND = "python"

SCORE_TOL = 1e-8
REL_LOGLIK_TOL = 1e-12
MAX_ITER = 50
BETA_CAP = 50.0


class CoxFitError(RuntimeError):
    """Numerical failure of a Cox fit (no events, divergence, singularity)."""


@dataclass(frozen=True)
class CoxFit:
    beta: np.ndarray
    info: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    names: tuple[str, ...] = ()

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(np.linalg.inv(self.info)))


@dataclass(frozen=True)
class BaselineHazard:
    """Right-continuous step function for the cumulative baseline hazard."""

    times: np.ndarray
    cumhaz: np.ndarray

    def __call__(self, t):
        return cumhaz_at(self, t)


def _sorted(time, event, Z):
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if not (time.shape[0] == event.shape[0] == Z.shape[0]):
        raise ValueError("time, event and Z must have the same number of rows")
    order = np.argsort(time, kind="stable")
    return (
        np.ascontiguousarray(time[order]),
        np.ascontiguousarray(event[order]),
        np.ascontiguousarray(Z[order]),
        order,
    )


def partial_score_info(time, event, Z, beta):
    """Log partial likelihood, score and observed information at ``beta``."""
    t, d, z, _ = _sorted(time, event, Z)
    return _sweep(t, d, z, np.ascontiguousarray(beta, dtype=float))


def cox_fit(
    time,
    event,
    Z,
    names: Sequence[str] | None = None,
    beta0=None,
    tol: float = SCORE_TOL,
    max_iter: int = MAX_ITER,
    beta_cap: float = BETA_CAP,
    history: list | None = None,
) -> CoxFit:
    """Maximise the Breslow partial likelihood by Newton-Raphson with step halving.

    Convergence is declared when the score sup-norm drops below ``tol``, or when
    the relative log-likelihood change is below 1e-12 with the score already
    below 1e-6 (the floating point floor for large samples). If ``history`` is
    a list, the log-likelihood of every accepted iterate is appended to it.
    """
    t, d, z, _ = _sorted(time, event, Z)
    p = z.shape[1]
    names = tuple(names) if names is not None else tuple(f"z{j}" for j in range(p))
    if d.sum() == 0:
        raise CoxFitError("no events: the partial likelihood is empty")

    beta = np.zeros(p) if beta0 is None else np.array(beta0, dtype=float)
    ll, U, info = _sweep(t, d, z, beta)
    info_zero = _sweep(t, d, z, np.zeros(p))[2] if beta0 is not None else info
    flat = np.diag(info_zero) <= 1e-12 * max(1.0, float(np.abs(info_zero).max()))
    if flat.any():
        raise CoxFitError(f"non-identifiable covariate: {names[int(np.flatnonzero(flat)[0])]}")

    if history is not None:
        history.append(float(ll))
    converged = np.abs(U).max() < tol
    it = 0
    while not converged and it < max_iter:
        it += 1
        try:
            step = np.linalg.solve(info, U)
        except np.linalg.LinAlgError as exc:
            raise CoxFitError("singular information matrix") from exc
        new = beta + step
        ll_new, U_new, info_new = _sweep(t, d, z, new)
        halvings = 0
        while not ll_new >= ll - 1e-12 * abs(ll) and halvings < 40:
            step *= 0.5
            new = beta + step
            ll_new, U_new, info_new = _sweep(t, d, z, new)
            halvings += 1
        if np.any(np.abs(new) > beta_cap):
            j = int(np.argmax(np.abs(new)))
            raise CoxFitError(f"monotone likelihood: coefficient of {names[j]} diverges")
        rel = abs(ll_new - ll) / max(abs(ll), 1.0)
        beta, ll, U, info = new, ll_new, U_new, info_new
        if history is not None:
            history.append(float(ll))
        smax = np.abs(U).max()
        converged = smax < tol or (rel < REL_LOGLIK_TOL and smax < 1e-6)

    if not converged:
        raise CoxFitError(f"Newton-Raphson did not converge in {max_iter} iterations")
    degenerate = np.diag(info) < 1e-8 * np.diag(info_zero)
    if degenerate.any():
        j = int(np.flatnonzero(degenerate)[0])
        raise CoxFitError(f"monotone likelihood: coefficient of {names[j]} diverges")
    if np.linalg.eigvalsh(info).min() <= 0:
        raise CoxFitError("information matrix is not positive definite at the solution")
    return CoxFit(beta=beta, info=info, loglik=float(ll), iterations=it, converged=True, names=names)


def _risk_sums(t, d, z, beta):
    """Risk-set sums at each distinct event time, in the shifted exp scale."""
    lp = z @ beta
    c = lp.max()
    w = np.exp(lp - c)
    first = np.searchsorted(t, t, side="left")
    s0 = np.cumsum(w[::-1])[::-1][first]
    s1 = np.cumsum((w[:, None] * z)[::-1], axis=0)[::-1][first]
    ev = d != 0
    etimes, idx, counts = np.unique(t[ev], return_index=True, return_counts=True)
    return w, etimes, counts.astype(float), s0[ev][idx], s1[ev][idx]


def breslow_cumhaz(fit: CoxFit, time, event, Z) -> BaselineHazard:
    """Breslow estimator: a jump of ``d_j / sum_{at risk} exp(beta'Z)`` at each event time."""
    t, d, z, _ = _sorted(time, event, Z)
    beta = np.asarray(fit.beta, dtype=float)
    c = float((z @ beta).max())
    _, etimes, counts, s0, _ = _risk_sums(t, d, z, beta)
    jumps = counts / (s0 * np.exp(c))
    return BaselineHazard(times=etimes, cumhaz=np.cumsum(jumps))


def cumhaz_at(bh: BaselineHazard, t):
    """Evaluate the step function; zero before the first jump, right-continuous."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("time must be non-negative")
    pos = np.searchsorted(bh.times, t_arr, side="right") - 1
    out = np.where(pos >= 0, bh.cumhaz[np.maximum(pos, 0)] if bh.cumhaz.size else 0.0, 0.0)
    return float(out) if out.ndim == 0 else out


def score_residuals(time, event, Z, beta) -> np.ndarray:
    """Per-subject score contributions (Lin-Wei), returned in input row order.

    Rows sum to the partial-likelihood score; each row is the subject's
    integrated ``(Z_i - Zbar(t)) dM_i(t)``.
    """
    t, d, z, order = _sorted(time, event, Z)
    beta = np.asarray(beta, dtype=float)
    w, etimes, counts, s0, s1 = _risk_sums(t, d, z, beta)
    zbar = s1 / s0[:, None]
    dlam = counts / s0
    H = np.cumsum(dlam)
    G = np.cumsum(dlam[:, None] * zbar, axis=0)
    pos = np.searchsorted(etimes, t, side="right") - 1
    has = pos >= 0
    Hi = np.where(has, H[np.maximum(pos, 0)], 0.0)
    Gi = np.where(has[:, None], G[np.maximum(pos, 0)], 0.0)
    res = -w[:, None] * (z * Hi[:, None] - Gi)
    ev = d != 0
    res[ev] += z[ev] - zbar[pos[ev]]
    out = np.empty_like(res)
    out[order] = res
    return out


def sweep_sorted(time, event, Z, beta):
    """Kernel entry point for callers that keep rows pre-sorted by ascending time."""
    return _sweep(time, event, Z, beta)
