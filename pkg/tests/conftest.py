import numpy as np
import pytest

from survmed import simulate as S


@pytest.fixture(scope="session")
def default_truth():
    sc = S.Scenario()
    theta = S.true_theta(sc)
    betas = (theta.out.beta1, theta.out.beta2)
    return sc, theta, betas, S.calibrate_weibull_scale(sc, betas)


@pytest.fixture(scope="session")
def sim_study(default_truth):
    """One dataset from the default generator (n1=10,000, n2=250, rho=0.4)."""
    sc, _, betas, v = default_truth
    return S.generate_study(sc, betas, v, np.random.default_rng(11))


@pytest.fixture(scope="session")
def small_study(default_truth):
    sc, _, betas, v = default_truth
    return S.generate_study(sc, betas, v, np.random.default_rng(5), n1=2000, n2=200)
