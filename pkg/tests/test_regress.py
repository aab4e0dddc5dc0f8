import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from survmed.regress import SingularDesignError, ols_fit, predict


def gauss_solve(A, b):
    """Plain Gaussian elimination with partial pivoting (independent oracle)."""
    A = np.array(A, dtype=float)
    b = np.array(b, dtype=float)
    n = len(b)
    for k in range(n):
        piv = k + int(np.argmax(np.abs(A[k:, k])))
        A[[k, piv]], b[[k, piv]] = A[[piv, k]], b[[piv, k]]
        for i in range(k + 1, n):
            f = A[i, k] / A[k, k]
            A[i, k:] -= f * A[k, k:]
            b[i] -= f * b[k]
    x = np.zeros(n)
    for i in range(n - 1, -1, -1):
        x[i] = (b[i] - A[i, i + 1 :] @ x[i + 1 :]) / A[i, i]
    return x


def test_exact_line():
    x = np.arange(5.0)
    fit = ols_fit(np.column_stack([np.ones(5), x]), 2 + 3 * x)
    assert np.allclose(fit.coefs, [2, 3], atol=1e-12)
    assert fit.resid_var == pytest.approx(0, abs=1e-20)


def test_intercept_only_is_mean():
    y = np.array([1.0, 4.0, 7.0, 2.0])
    fit = ols_fit(np.ones((4, 1)), y)
    assert fit.coefs[0] == pytest.approx(y.mean())
    assert fit.resid_var == pytest.approx(np.mean((y - y.mean()) ** 2))


def test_random_system_matches_normal_equations():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(50), rng.standard_normal((50, 2))])
    y = rng.standard_normal(50)
    fit = ols_fit(X, y)
    oracle = gauss_solve(X.T @ X, X.T @ y)
    assert np.allclose(fit.coefs, oracle, atol=1e-10)
    assert np.allclose(fit.xtx_inv, np.linalg.inv(X.T @ X), atol=1e-10)
    for x in rng.standard_normal((5, 3)):
        assert predict(fit, x) == pytest.approx(float(x @ oracle), abs=1e-10)


def test_rank_deficient_names_column():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(10)
    X = np.column_stack([np.ones(10), x, 2 * x])
    with pytest.raises(SingularDesignError, match="dup"):
        ols_fit(X, rng.standard_normal(10), names=["intercept", "x", "dup"])


def test_too_few_rows():
    with pytest.raises(SingularDesignError):
        ols_fit(np.ones((1, 2)), np.ones(1))


def test_predict_basics():
    fit = ols_fit(np.column_stack([np.ones(5), np.arange(5.0)]), 2 + 3 * np.arange(5.0))
    assert predict(fit, [1, 1]) == pytest.approx(5)
    zero = ols_fit(np.column_stack([np.ones(4), np.arange(4.0)]), np.zeros(4))
    assert predict(zero, [1, 123.0]) == pytest.approx(0, abs=1e-12)
    with pytest.raises(ValueError):
        predict(fit, [1, 2, 3])


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 40), st.integers(1, 4), st.integers(0, 10_000))
def test_residuals_orthogonal(n, q, seed):
    rng = np.random.default_rng(seed)
    q = min(q, n - 1)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, q - 1))]) if q > 1 else np.ones((n, 1))
    y = rng.standard_normal(n)
    fit = ols_fit(X, y)
    r = y - X @ fit.coefs
    assert np.abs(X.T @ r).max() < 1e-8 * n
    assert fit.resid_var >= 0


def test_duplicated_row_acts_as_weight_two():
    rng = np.random.default_rng(4)
    X = np.column_stack([np.ones(12), rng.standard_normal(12)])
    y = rng.standard_normal(12)
    dup = ols_fit(np.vstack([X, X[3]]), np.append(y, y[3]))
    w = np.ones(12)
    w[3] = 2
    weighted = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * y))
    assert np.allclose(dup.coefs, weighted, atol=1e-12)
