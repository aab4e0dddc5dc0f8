"""Ordinary least squares kernel shared by every linear regression in the package."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class SingularDesignError(ValueError):
    """Raised when a design matrix is not of full column rank."""


@dataclass(frozen=True)
class LinearFit:
    """Result of an OLS fit.

    ``resid_var`` uses denominator ``n`` (not ``n - q``), the convention of the
    residual-variance estimating equations. It is biased downwards by a factor
    ``(n - q) / n`` in small samples.
    """

    coefs: np.ndarray
    resid_var: float
    xtx_inv: np.ndarray
    n_obs: int

    @property
    def q(self) -> int:
        return self.coefs.shape[0]


def ols_fit(
    design: np.ndarray,
    response: np.ndarray,
    names: Sequence[str] | None = None,
    rtol: float = 1e-10,
) -> LinearFit:
    """Least squares of ``response`` on ``design`` via a QR decomposition.

    Parameters
    ----------
    design : (n, q) array
        Design matrix, intercept column included by the caller.
    response : (n,) array
    names : sequence of str, optional
        Column names used in the rank-deficiency message.
    rtol : float
        A column is declared redundant when its pivot ``|R_jj|`` falls below
        ``rtol * max|R_kk|``.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    if X.ndim != 2:
        raise ValueError("design must be a 2-d array")
    n, q = X.shape
    if y.shape != (n,):
        raise ValueError(f"response has shape {y.shape}, expected ({n},)")
    if n < q:
        raise SingularDesignError(f"{n} observations for {q} coefficients")

    Q, R = np.linalg.qr(X, mode="reduced")
    diag = np.abs(np.diag(R))
    scale = diag.max() if q else 1.0
    bad = np.flatnonzero(diag <= rtol * max(scale, 1e-300))
    if bad.size:
        j = int(bad[0])
        label = names[j] if names is not None else f"column {j}"
        raise SingularDesignError(f"design is rank deficient: {label} is collinear with earlier columns")

    coefs = np.linalg.solve(R, Q.T @ y)
    resid = y - X @ coefs
    R_inv = np.linalg.solve(R, np.eye(q))
    xtx_inv = R_inv @ R_inv.T
    xtx_inv = 0.5 * (xtx_inv + xtx_inv.T)
    return LinearFit(coefs=coefs, resid_var=float(resid @ resid) / n, xtx_inv=xtx_inv, n_obs=n)


def predict(fit: LinearFit, x: np.ndarray) -> float | np.ndarray:
    """Linear predictor ``x @ coefs`` for one row (scalar) or many rows."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != fit.q:
        raise ValueError(f"expected {fit.q} regressors, got {x.shape[-1]}")
    out = x @ fit.coefs
    return float(out) if out.ndim == 0 else out
