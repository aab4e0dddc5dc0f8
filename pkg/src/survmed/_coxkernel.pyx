# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Breslow-tie partial likelihood sweep.

Rows must be sorted by ascending time. The risk-set sums are accumulated in a
single backwards pass, so the cost is O(n p^2).
"""

import numpy as np
from libc.math cimport exp, log


def cox_sweep(const double[::1] time, const double[::1] event,
              const double[:, ::1] Z, const double[::1] beta):
    cdef Py_ssize_t n = Z.shape[0]
    cdef Py_ssize_t p = Z.shape[1]
    cdef Py_ssize_t i, j, k, a, b
    cdef double t, w, s0 = 0.0, c, loglik = 0.0, d

    lp_arr = np.empty(n)
    s1_arr = np.zeros(p)
    s2_arr = np.zeros((p, p))
    score_arr = np.zeros(p)
    info_arr = np.zeros((p, p))
    cdef double[::1] lp = lp_arr
    cdef double[::1] s1 = s1_arr
    cdef double[:, ::1] s2 = s2_arr
    cdef double[::1] score = score_arr
    cdef double[:, ::1] info = info_arr

    if n == 0:
        return 0.0, score_arr, info_arr

    c = -1e308
    for i in range(n):
        w = 0.0
        for a in range(p):
            w += Z[i, a] * beta[a]
        lp[i] = w
        if w > c:
            c = w

    i = n - 1
    while i >= 0:
        t = time[i]
        j = i
        while j >= 0 and time[j] == t:
            w = exp(lp[j] - c)
            s0 += w
            for a in range(p):
                s1[a] += w * Z[j, a]
                for b in range(a + 1):
                    s2[a, b] += w * Z[j, a] * Z[j, b]
            j -= 1
        d = 0.0
        for k in range(j + 1, i + 1):
            if event[k] != 0.0:
                d += 1.0
                loglik += lp[k] - c
                for a in range(p):
                    score[a] += Z[k, a]
        if d > 0.0:
            loglik -= d * log(s0)
            for a in range(p):
                score[a] -= d * s1[a] / s0
                for b in range(a + 1):
                    info[a, b] += d * (s2[a, b] / s0 - s1[a] * s1[b] / (s0 * s0))
        i = j

    for a in range(p):
        for b in range(a):
            info[b, a] = info[a, b]
    return loglik, score_arr, info_arr
