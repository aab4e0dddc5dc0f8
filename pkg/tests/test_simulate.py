import csv
import json
import math

import numpy as np
import pytest

from survmed import simulate as S
from survmed.calibrate import MedParams, fit_error_model, fit_mediator
from survmed.regress import ols_fit


def test_beta_solver_closed_form():
    sc = S.Scenario(beta3=0.0)
    b1, b2 = S.solve_outcome_betas(sc, MedParams(0.0, 0.5, np.zeros(1), 0.4))
    assert b2 == pytest.approx(0.24328, abs=1e-5)
    assert b1 == pytest.approx(0.28382, abs=1e-5)


def test_beta_solver_hits_targets():
    for sc in (S.Scenario(), S.Scenario(mp_target=0.6, te_target=math.log(2.0), beta3=-0.2)):
        from survmed.mediate import Contrast, approx_measures

        m = approx_measures(S.true_theta(sc), Contrast(1.0, 0.0, (0.0,)))
        assert m.te == pytest.approx(sc.te_target, abs=1e-12)
        assert m.mp == pytest.approx(sc.mp_target, abs=1e-12)


def test_beta_solver_rejects_zero_alpha1():
    with pytest.raises(ValueError):
        S.solve_outcome_betas(S.Scenario(), MedParams(0.0, 0.0, np.zeros(1), 0.4))


def test_implied_parameters():
    med = S.implied_mediator()
    assert med.alpha1 == pytest.approx(1 / 6) and med.alpha2[0] == pytest.approx(1 / 6)
    assert med.sigma_alpha2 == pytest.approx(0.5 - 0.5 * 0.2 * (2 / 6))
    err = S.implied_error(0.4)
    assert err.sigma_gamma2 == pytest.approx(0.4058, abs=1e-4)
    assert S.implied_rho(0.4) == pytest.approx(0.02358, abs=1e-5)
    assert S.implied_rho(1.0) == 0.0


def test_generated_moments(default_truth):
    sc, theta, betas, v = default_truth
    study = S.generate_study(sc, betas, v, np.random.default_rng(3), n1=200_000, n2=200_000)
    m = study.main
    X = np.column_stack([m.mediator, m.exposure_true, m.covariates[:, 0]])
    assert np.allclose(np.cov(X.T), S._mvn_cov(), atol=0.006)
    assert np.allclose(X.mean(axis=0), 0, atol=0.006)
    assert np.corrcoef(m.exposure_true, m.exposure_star)[0, 1] == pytest.approx(
        0.4 / math.sqrt(0.4**2 + 1 - 0.4**2), abs=0.006)
    err = fit_error_model(study)
    target = S.implied_error(0.4)
    assert err.gamma1 == pytest.approx(target.gamma1, abs=0.01)
    assert err.sigma_gamma2 == pytest.approx(target.sigma_gamma2, rel=0.01)
    med = fit_mediator(study, err)
    assert med.alpha1 == pytest.approx(1 / 6, abs=0.01)
    fit = ols_fit(np.column_stack([np.ones(study.n1), m.exposure_star, m.mediator, m.covariates]),
                  m.exposure_true)
    assert np.allclose(fit.coefs, S.implied_orc1(0.4), atol=0.01)


@pytest.mark.parametrize("target,tol", [(0.05, 0.005), (0.5, 0.01)])
def test_event_rate_calibration(target, tol):
    sc = S.Scenario(event_rate_target=target)
    th = S.true_theta(sc)
    betas = (th.out.beta1, th.out.beta2)
    v = S.calibrate_weibull_scale(sc, betas)
    study = S.generate_study(sc, betas, v, np.random.default_rng(9), n1=100_000, n2=10)
    assert abs(study.main.event.mean() - target) < tol
    assert study.main.time.max() <= sc.t_star


def test_event_rate_monotone_in_scale(default_truth):
    sc, _, betas, v = default_truth
    rates = [S.event_rate(sc, betas, v * f, n=20_000) for f in (0.5, 0.8, 1.0, 1.25, 2.0)]
    assert all(a < b for a, b in zip(rates, rates[1:]))


def test_unbracketable_rate_rejected():
    sc = S.Scenario(event_rate_target=0.999, censor_rate=0.5)
    th = S.true_theta(sc)
    with pytest.raises(ValueError):
        S.calibrate_weibull_scale(sc, (th.out.beta1, th.out.beta2))


def test_perfect_measurement(default_truth):
    _, _, betas, v = default_truth
    sc = S.Scenario(rho_aastar=1.0)
    study = S.generate_study(sc, betas, v, np.random.default_rng(2), n1=500, n2=50)
    assert np.allclose(study.main.exposure_star, study.main.exposure_true, atol=1e-12)
    assert np.allclose(study.validation.exposure_star, study.validation.exposure, atol=1e-12)


def test_skew_normal_errors(default_truth):
    _, _, betas, v = default_truth
    sc = S.Scenario(error_dist="skew-normal")
    study = S.generate_study(sc, betas, v, np.random.default_rng(4), n1=200_000, n2=10)
    m = study.main
    e = m.exposure_star - 0.4 * m.exposure_true
    assert e.mean() == pytest.approx(0, abs=0.005)
    assert e.var() == pytest.approx(0.5 * (1 - 0.16), rel=0.01)
    from scipy import stats

    assert stats.skew(e) == pytest.approx(float(stats.skewnorm(5.0).stats(moments="s")), abs=0.03)


def test_replicate_streams(default_truth):
    sc, _, betas, v = default_truth
    a = S.generate_study(sc, betas, v, S.replicate_rng(1, 7), n1=100, n2=20)
    b = S.generate_study(sc, betas, v, S.replicate_rng(1, 7), n1=100, n2=20)
    c = S.generate_study(sc, betas, v, S.replicate_rng(1, 8), n1=100, n2=20)
    assert np.array_equal(a.main.time, b.main.time)
    assert not np.array_equal(a.main.time, c.main.time)


def test_true_cumhaz():
    sc = S.Scenario()
    assert S.true_cumhaz(sc, 0.02, 50.0) == pytest.approx(1.0)


def same_rows(a, b):
    return json.dumps(S._jsonable(a)) == json.dumps(S._jsonable(b))


SMALL = dict(n1=1500, n2=150, replications=6, sandwich=False)


def test_run_scenario_small_and_deterministic():
    sc = S.Scenario(**SMALL, k_sweep=(2,), exact_times=(20.0, 40.0))
    r1 = S.run_scenario(sc)
    r2 = S.run_scenario(sc)
    labels = {r["method"] for r in r1.rows}
    assert labels == {"U", "G", "O1", "O2", "R", "R2"}
    assert len(r1.rows) == 6 * 4
    assert same_rows(r1.rows, r2.rows)
    for label in labels:
        assert np.array_equal(r1.estimates[label], r2.estimates[label], equal_nan=True)
    assert r1.row("G", "nie")["true"] == pytest.approx(r1.truth["nie"])
    assert r1.truth["rho"] == pytest.approx(S.implied_rho(0.4))
    assert {row["t"] for row in r1.exact_rows} == {20.0, 40.0}
    assert all(row["all_finite"] for row in r1.exact_rows)
    with pytest.raises(KeyError):
        r1.row("X", "nie")


def test_run_scenario_worker_count_invariant():
    sc = S.Scenario(**{**SMALL, "replications": 4}, methods=("unadjusted", "orc1"))
    assert same_rows(S.run_scenario(sc, n_jobs=1).rows, S.run_scenario(sc, n_jobs=2).rows)


def test_run_scenario_sandwich_coverage_columns():
    sc = S.Scenario(**{**SMALL, "sandwich": True, "replications": 3}, methods=("orc2",))
    res = S.run_scenario(sc)
    assert all(0 <= r["coverage_v1"] <= 100 for r in res.rows)
    assert all(math.isnan(r["coverage_v2"]) for r in res.rows)


def test_run_scenario_failure_threshold(monkeypatch):
    from survmed.coxfit import CoxFitError

    real = S.fit_method

    def flaky(study, method, **kw):
        if method == "orc1":
            raise CoxFitError("forced")
        return real(study, method, **kw)

    monkeypatch.setattr(S, "fit_method", flaky)
    with pytest.raises(RuntimeError, match="O1"):
        S.run_scenario(S.Scenario(**SMALL, methods=("unadjusted", "orc1")))


def test_result_files(tmp_path):
    res = S.run_scenario(S.Scenario(**{**SMALL, "replications": 3}, methods=("gold", "orc2")))
    res.to_csv(tmp_path / "r.csv")
    res.to_json(tmp_path / "r.json")
    rows = list(csv.DictReader((tmp_path / "r.csv").open()))
    data = json.loads((tmp_path / "r.json").read_text())
    assert len(rows) == len(data["rows"]) == 8
    for a, b in zip(rows, data["rows"]):
        assert a["method"] == b["method"]
        assert float(a["percent_bias"]) == pytest.approx(b["percent_bias"], rel=1e-12)
    assert data["scenario"]["n1"] == 1500


def test_scenario_from_mapping():
    sc = S.Scenario.from_mapping({"te_target": "log(1.5)", "n1": "2e3", "k_sweep": "2, 8",
                                  "exact_times": "10 20", "sandwich": "no", "methods": "orc1,rrc"})
    assert sc.te_target == pytest.approx(math.log(1.5))
    assert sc.n1 == 2000 and sc.k_sweep == (2, 8) and sc.exact_times == (10.0, 20.0)
    assert sc.sandwich is False and sc.methods == ("orc1", "rrc")
    with pytest.raises(ValueError):
        S.Scenario.from_mapping({"nope": "1"})


@pytest.mark.parametrize("kw", [dict(replications=0), dict(event_rate_target=1.0), dict(mp_target=0.0),
                                dict(rho_aastar=0.0), dict(n2=0), dict(error_dist="t")])
def test_scenario_validation(kw):
    with pytest.raises(ValueError):
        S.Scenario(**kw)
