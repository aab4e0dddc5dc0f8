"""Compare the compiled and numpy Cox partial-likelihood kernels.

Run with ``python benchmarks/bench_cox.py``. Prints the median wall time of one
loglik/score/information sweep and of a full Newton fit for each backend.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from survmed import _coxkernel_py, coxfit

try:
    from survmed import _coxkernel
except ImportError:  # extension not built
    _coxkernel = None


def make_data(n: int, p: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, p))
    beta = np.linspace(0.5, -0.5, p)
    t = rng.exponential(np.exp(-Z @ beta))
    c = rng.exponential(2.0, n)
    time, event = np.minimum(t, c), (t <= c).astype(float)
    order = np.argsort(time, kind="stable")
    return (np.ascontiguousarray(time[order]), np.ascontiguousarray(event[order]),
            np.ascontiguousarray(Z[order]), beta)


def bench(fn, repeat: int) -> float:
    return float(np.median(timeit.repeat(fn, number=1, repeat=repeat)))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--sizes", default="1000,10000,100000")
    ap.add_argument("--p", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args(argv)

    kernels = {"numpy": _coxkernel_py.cox_sweep}
    if _coxkernel is not None:
        kernels["cython"] = _coxkernel.cox_sweep
    print(f"default backend: {coxfit.BACKEND}")
    print(f"{'n':>8} {'kernel':>8} {'sweep ms':>10} {'fit ms':>10} {'speedup':>8}")
    for n in (int(s) for s in args.sizes.split(",")):
        t, d, Z, beta = make_data(n, args.p)
        ref = None
        for name, sweep in kernels.items():
            ll, U, info = sweep(t, d, Z, beta)
            if ref is None:
                ref = (ll, U, info)
            else:
                assert np.allclose(ll, ref[0], rtol=1e-9) and np.allclose(U, ref[1], rtol=1e-7, atol=1e-8)
            s = bench(lambda: sweep(t, d, Z, beta), args.repeat)
            orig = coxfit._sweep
            coxfit._sweep = sweep
            try:
                f = bench(lambda: coxfit.cox_fit(t, d, Z), max(3, args.repeat // 2))
            finally:
                coxfit._sweep = orig
            base = s if name == "numpy" else base
            print(f"{n:>8} {name:>8} {1e3 * s:>10.3f} {1e3 * f:>10.2f} {base / s:>8.2f}")


if __name__ == "__main__":
    main()
