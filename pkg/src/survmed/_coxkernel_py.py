"""Numpy implementation of the Breslow-tie partial likelihood sweep.

Same contract as the compiled ``_coxkernel.cox_sweep``: rows sorted by
ascending time, returns ``(loglik, score, info)``.
"""

from __future__ import annotations

import numpy as np


def cox_sweep(time: np.ndarray, event: np.ndarray, Z: np.ndarray, beta: np.ndarray):
    n, p = Z.shape
    if n == 0:
        return 0.0, np.zeros(p), np.zeros((p, p))
    lp = Z @ beta
    c = lp.max()
    w = np.exp(lp - c)
    # position of the first member of each tie group: its reverse cumsum is the risk-set sum
    first = np.searchsorted(time, time, side="left")
    s0 = np.cumsum(w[::-1])[::-1][first]
    wz = w[:, None] * Z
    s1 = np.cumsum(wz[::-1], axis=0)[::-1][first]
    ev = event != 0
    s0e, s1e, Ze = s0[ev], s1[ev], Z[ev]
    s2 = np.cumsum((wz[:, :, None] * Z[:, None, :])[::-1], axis=0)[::-1][first][ev]

    loglik = float(np.sum(lp[ev] - c - np.log(s0e)))
    zbar = s1e / s0e[:, None]
    score = Ze.sum(axis=0) - zbar.sum(axis=0)
    info = (s2 / s0e[:, None, None]).sum(axis=0) - zbar.T @ zbar
    info = 0.5 * (info + info.T)
    return loglik, score, info
