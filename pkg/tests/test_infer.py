import numpy as np
import pytest

from survmed import simulate as S
from survmed.calibrate import METHODS, fit_method
from survmed.coxfit import cox_fit
from survmed.dataio import MainData, Study, ValidationData
from survmed.infer import (
    BootstrapFailure,
    bootstrap_ci,
    delta_method_se,
    fd_jacobian,
    full_stack_theta,
    measure_gradient,
    sandwich_theta,
    sandwich_variance,
    stacked_system,
)
from survmed.mediate import Contrast, Theta, approx_measures
from survmed.regress import ols_fit


def test_fd_jacobian_linear_map():
    A = np.array([[1.0, 2.0], [3.0, -4.0], [0.5, 0.0]])
    assert np.allclose(fd_jacobian(lambda x: A @ x, np.array([0.3, 7.0])), A, atol=1e-9)


@pytest.mark.parametrize("method", ["orc1", "orc2", "rrc"])
def test_block_correction_equals_full_stack(small_study, method):
    system = stacked_system(small_study, method)
    V1, V2 = sandwich_theta(system), full_stack_theta(system)
    assert np.allclose(V1, V2, rtol=1e-6, atol=1e-12 * np.abs(V2).max())


@pytest.mark.parametrize("seed", range(4))
def test_sandwich_positive_semidefinite(default_truth, seed):
    sc, _, betas, v = default_truth
    study = S.generate_study(sc, betas, v, np.random.default_rng(100 + seed), n1=1500, n2=150)
    for method in METHODS:
        V = sandwich_variance(study, method).v_theta
        assert np.allclose(V, V.T)
        assert np.linalg.eigvalsh(V).min() >= -1e-10 * np.abs(V).max()


def test_te_gradient_without_interaction(small_study):
    fit = fit_method(small_study, "orc2", include_interaction=False)
    th = fit.theta
    p = small_study.p
    c = Contrast(1.0, 0.0, (0.0,))
    g = measure_gradient(th, p, c, "te", include_interaction=False)
    # TE = beta1 + beta2 alpha1 for a unit contrast
    expected = np.zeros_like(th)
    alpha1, beta2 = th[1], th[p + 4]
    expected[1] = beta2
    expected[p + 3] = 1.0
    expected[p + 4] = alpha1
    assert np.allclose(g, expected, atol=1e-6)


def test_gold_sandwich_matches_model_based(default_truth):
    """Under a correct model the robust SEs agree with the model-based ones."""
    sc, _, betas, v = default_truth
    study = S.generate_study(sc, betas, v, np.random.default_rng(8), n1=20000, n2=100)
    est = sandwich_variance(study, "gold")
    se = np.sqrt(np.diag(est.v_theta))
    m = study.main
    vd = study.validation
    x = np.column_stack([np.ones(study.n1 + study.n2), np.concatenate([m.exposure_true, vd.exposure]),
                         np.vstack([m.covariates, vd.covariates])])
    ols = ols_fit(x, np.concatenate([m.mediator, vd.mediator]))
    assert np.allclose(se[:3], np.sqrt(ols.resid_var * np.diag(ols.xtx_inv)), rtol=0.05)
    fit = fit_method(study, "gold")
    Z = np.column_stack([m.exposure_true, m.mediator, m.exposure_true * m.mediator, m.covariates])
    cox = cox_fit(m.time, m.event, Z)
    assert np.allclose(fit.out.as_vector(), cox.beta, atol=1e-8)
    assert np.allclose(se[4:], cox.se, rtol=0.05)


def test_omitting_gamma_changes_nie_se(sim_study):
    c = Contrast(1.0, 0.0, (0.0,))
    full = sandwich_variance(sim_study, "orc2", c)
    naive = sandwich_variance(sim_study, "orc2", c, omit=("gamma",))
    assert abs(full.measure_se["nie"] / naive.measure_se["nie"] - 1) > 0.01


def test_sandwich_ci_and_delta(default_truth):
    sc, _, betas, v = default_truth
    sim_study = S.generate_study(S.Scenario(rho_aastar=0.8), betas, v, np.random.default_rng(21), n1=10000, n2=2000)
    c = Contrast(1.0, 0.0, (0.0,))
    est = sandwich_variance(sim_study, "orc1", c)
    for name in ("nie", "nde", "te", "mp"):
        pt, se = getattr(est.point, name), est.measure_se[name]
        assert se > 0
        assert est.ci_low[name] == pytest.approx(pt - 1.959963984540054 * se)
    th = Theta.from_vector(stacked_system(sim_study, "orc1").theta, 1)
    assert delta_method_se(th, est.v_theta, c, "nie") == pytest.approx(est.measure_se["nie"])
    logit = sandwich_variance(sim_study, "orc1", c, mp_scale="logit")
    assert 0 < logit.point.mp < 1
    assert 0 < logit.ci_low["mp"] < logit.point.mp < logit.ci_high["mp"] < 1


def test_sandwich_se_tracks_sampling_sd(default_truth):
    sc, theta, betas, v = default_truth
    sc = S.Scenario(rho_aastar=0.6)
    c = Contrast(1.0, 0.0, (0.0,))
    est, ses = [], []
    for r in range(40):
        study = S.generate_study(sc, betas, v, S.replicate_rng(77, r), n1=3000, n2=500)
        ve = sandwich_variance(study, "orc2", c)
        est.append(ve.point.nde)
        ses.append(ve.measure_se["nde"])
    ratio = np.mean(ses) / np.std(est, ddof=1)
    assert 0.7 < ratio < 1.4


def test_bootstrap_deterministic_and_sizes(small_study, monkeypatch):
    c = Contrast(1.0, 0.0, (0.0,))
    seen = []
    orig = Study.resample

    def spy(self, rng):
        out = orig(self, rng)
        seen.append((out.n1, out.n2))
        return out

    monkeypatch.setattr(Study, "resample", spy)
    r1 = bootstrap_ci(small_study, "orc1", b=20, seed=3, c=c, min_b=10)
    r2 = bootstrap_ci(small_study, "orc1", b=20, seed=3, c=c, min_b=10)
    assert np.array_equal(r1.replicates, r2.replicates)
    assert set(seen) == {(small_study.n1, small_study.n2)}
    assert r1.n_failed == 0
    for name in ("nie", "nde", "te"):
        assert r1.percentile.ci_low[name] < r1.percentile.ci_high[name]
    r3 = bootstrap_ci(small_study, "orc1", b=20, seed=4, c=c, min_b=10)
    assert not np.array_equal(r1.replicates, r3.replicates)


def test_bootstrap_min_b(small_study):
    with pytest.raises(ValueError):
        bootstrap_ci(small_study, "orc1", b=50, seed=1, c=Contrast(1, 0, (0.0,)))


def test_bootstrap_fails_without_events(small_study):
    m = small_study.main
    main = MainData(m.time, np.zeros(small_study.n1), m.mediator, m.exposure_star, m.covariates, m.exposure_true)
    study = Study(main, small_study.validation, small_study.covariate_names, small_study.max_followup)
    with pytest.raises(BootstrapFailure):
        bootstrap_ci(study, "orc1", b=100, seed=1, c=Contrast(1, 0, (0.0,)))


def test_bootstrap_fails_when_replicates_fail(small_study):
    """Few events: many resamples lose every event and the run is rejected."""
    m = small_study.main
    ev = np.zeros(small_study.n1)
    ev[np.argsort(m.time)[:2]] = 1.0
    main = MainData(m.time, ev, m.mediator, m.exposure_star, m.covariates, m.exposure_true)
    study = Study(main, small_study.validation, small_study.covariate_names, small_study.max_followup)
    with pytest.raises(BootstrapFailure, match="replicates failed"):
        bootstrap_ci(study, "unadjusted", b=100, seed=1, c=Contrast(1, 0, (0.0,)))
