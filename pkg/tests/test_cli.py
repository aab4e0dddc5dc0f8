import csv
import json
import math

import numpy as np
import pytest

from survmed import simulate as S
from survmed.cli import main
from survmed.dataio import write_study
from survmed.mediate import theorem1_relbias

FIT_COLUMNS = ["method"] + [f"{m}{s}" for m in ("nie", "nde", "te", "mp") for s in ("", "_se", "_lo", "_hi")]


def write(study, tmp_path, stem="s"):
    mp, vp = tmp_path / f"{stem}_main.csv", tmp_path / f"{stem}_val.csv"
    write_study(study, mp, vp)
    return str(mp), str(vp)


@pytest.fixture(scope="module")
def noerror_files(tmp_path_factory, default_truth):
    _, _, betas, v = default_truth
    sc = S.Scenario(rho_aastar=1.0)
    study = S.generate_study(sc, betas, v, np.random.default_rng(31), n1=3000, n2=300)
    return write(study, tmp_path_factory.mktemp("noerr"))


@pytest.fixture(scope="module")
def sim_files(tmp_path_factory, sim_study):
    return write(sim_study, tmp_path_factory.mktemp("sim"))


def run_json(capsys, argv):
    code = main(argv + ["--format", "json"])
    out = capsys.readouterr().out
    return code, json.loads(out) if code == 0 else out


def test_fit_no_error_reproduces_gold(capsys, noerror_files):
    m, v = noerror_files
    code, data = run_json(capsys, ["fit", "--main", m, "--validation", v, "--schema", "covariates=w",
                                   "--method", "gold,naive,orc1,orc2,rrc"])
    assert code == 0
    rows = {r["method"]: r for r in data["rows"]}
    gold = rows.pop("Gold")
    assert set(rows) == {"Naive", "ORC1", "ORC2", "RRC"}
    for r in rows.values():
        for name in ("nie", "nde", "te", "mp"):
            assert r[name] == pytest.approx(gold[name], abs=1e-6)


def test_fit_simulated_study(capsys, sim_files, tmp_path):
    m, v = sim_files
    out = tmp_path / "fit.csv"
    code = main(["fit", "--main", m, "--validation", v, "--schema", "covariates=w", "--out", str(out),
                 "--time-grid", "10,30"])
    assert code == 0
    table = capsys.readouterr().out
    assert "ORC2" in table
    rows = list(csv.DictReader(out.open()))
    assert [r["method"] for r in rows] == ["Naive", "ORC1", "ORC2", "RRC"]
    assert list(rows[0]) == FIT_COLUMNS
    for r in rows:
        for name in ("nie", "nde", "te"):
            assert math.isfinite(float(r[f"{name}_se"])) and float(r[f"{name}_se"]) > 0
    exact = list(csv.DictReader((tmp_path / "fit_exact.csv").open()))
    assert len(exact) == 8 and {float(r["t"]) for r in exact} == {10.0, 30.0}


def test_fit_contrast_and_bootstrap(capsys, sim_files):
    m, v = sim_files
    argv = ["fit", "--main", m, "--validation", v, "--schema", "covariates=w", "--method", "o1",
            "--contrast-a", "1", "--contrast-astar", "0", "--contrast-w", "w=0", "--bootstrap", "100", "--seed", "5"]
    code, d1 = run_json(capsys, argv)
    code2, d2 = run_json(capsys, argv)
    assert code == code2 == 0
    assert d1 == d2
    assert d1["contrast"] == {"a": 1.0, "a_star": 0.0, "w": {"w": 0.0}}
    row = d1["rows"][0]
    assert row["nie_boot_lo"] < row["nie_boot_hi"] and "nie_se" in row


def test_fit_missing_file(capsys, sim_files, tmp_path):
    m, _ = sim_files
    missing = tmp_path / "nowhere.csv"
    code = main(["fit", "--main", m, "--validation", str(missing), "--schema", "covariates=w"])
    assert code == 2
    assert str(missing) in capsys.readouterr().err


def test_fit_gold_needs_true_exposure(capsys, tmp_path, sim_study):
    from survmed.dataio import MainData, Study

    mm = sim_study.main
    bare = Study(MainData(mm.time, mm.event, mm.mediator, mm.exposure_star, mm.covariates), sim_study.validation,
                 sim_study.covariate_names, sim_study.max_followup)
    m, v = write(bare, tmp_path)
    assert main(["fit", "--main", m, "--validation", v, "--schema", "covariates=w", "--method", "gold"]) == 2


def test_fit_numerical_failure_exit(capsys, tmp_path, sim_study):
    from survmed.dataio import MainData, Study

    mm = sim_study.main
    noev = Study(MainData(mm.time, np.zeros(sim_study.n1), mm.mediator, mm.exposure_star, mm.covariates),
                 sim_study.validation, sim_study.covariate_names, sim_study.max_followup)
    m, v = write(noev, tmp_path)
    assert main(["fit", "--main", m, "--validation", v, "--schema", "covariates=w", "--method", "orc1"]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_bias_identity_and_example(capsys):
    code, data = run_json(capsys, ["bias", "--gamma1", "1", "--rho", "0"])
    assert code == 0
    for r in data["rows"]:
        assert all(r[f"relbias_{k}"] == 0 for k in ("nie", "nde", "te", "mp"))
    code, data = run_json(capsys, ["bias", "--gamma1", "0.58", "--rho", "0.015", "--mp-grid", "0.4"])
    (row,) = data["rows"]
    expected = theorem1_relbias(0.58, 0.015, 0.4)
    assert row["relbias_nie"] == pytest.approx(expected.nie) and row["relbias_mp"] == pytest.approx(expected.mp)


def test_bias_surface(capsys, tmp_path):
    surf = tmp_path / "surf.csv"
    assert main(["bias", "--gamma1", "0.6", "--rho", "0.02", "--surface-out", str(surf)]) == 0
    rows = list(csv.DictReader(surf.open()))
    col = [float(r["rho"]) for r in rows if float(r["rho_am"]) == 0.2]
    assert len(col) == 11 and max(col) <= 0.04 + 1e-15 and min(col) >= 0


def test_bias_bad_grid(capsys):
    assert main(["bias", "--gamma1", "1", "--rho", "0", "--mp-grid", "0.5,1.2"]) == 2


def test_bias_from_validation(capsys, sim_files):
    _, v = sim_files
    code, data = run_json(capsys, ["bias", "--validation", v, "--schema", "covariates=w", "--mp-grid", "0.3"])
    assert code == 0
    row = data["rows"][0]
    assert 0 < row["gamma1"] < 1 and 0 <= row["rho"] < 0.2


def test_simulate_reduced_and_repeatable(capsys, tmp_path):
    argv = ["simulate", "--replications", "4", "--n1", "1500", "--n2", "150", "--seed", "9"]
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("sandwich = false\n")
    out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(argv + ["--config", str(cfg), "--out", str(out1)]) == 0
    assert main(argv + ["--config", str(cfg), "--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    methods = {r["method"] for r in csv.DictReader(out1.open())}
    assert methods == {"U", "G", "O1", "O2", "R"}


def test_simulate_zero_replications(capsys):
    assert main(["simulate", "--replications", "0"]) == 2
    assert "replications" in capsys.readouterr().err


def test_calibrate_no_error(capsys, noerror_files):
    m, v = noerror_files
    code, data = run_json(capsys, ["calibrate", "--main", m, "--validation", v, "--schema", "covariates=w"])
    assert code == 0
    est = {r["parameter"]: r["estimate"] for r in data["rows"]}
    assert est["gamma0"] == pytest.approx(0, abs=1e-10)
    assert est["gamma1"] == pytest.approx(1, abs=1e-10)
    assert est["gamma2[w]"] == pytest.approx(0, abs=1e-10)
    assert data["summary"]["rho"] == pytest.approx(0, abs=1e-10)


def test_calibrate_large_validation(capsys, tmp_path, default_truth):
    _, _, betas, v = default_truth
    study = S.generate_study(S.Scenario(rho_aastar=0.6), betas, v, np.random.default_rng(12), n1=10, n2=10_000)
    _, vp = write(study, tmp_path)
    resid = tmp_path / "resid.csv"
    code, data = run_json(capsys, ["calibrate", "--validation", vp, "--schema", "covariates=w",
                                   "--residuals-out", str(resid)])
    assert code == 0
    assert data["summary"]["gamma1"] == pytest.approx(0.6, abs=0.02)
    assert len(list(csv.DictReader(resid.open()))) == 10_000
    assert abs(data["summary"]["skewness"]) < 0.2


def test_config_overrides_flags(capsys, tmp_path):
    cfg = tmp_path / "bias.cfg"
    cfg.write_text("gamma1 = 1\nrho = 0\nmp-grid = 0.5\n")
    code, data = run_json(capsys, ["bias", "--gamma1", "0.3", "--rho", "0.4", "--config", str(cfg)])
    assert code == 0
    assert data["rows"] == [{"gamma1": 1.0, "rho": 0.0, "mp": 0.5, "relbias_nie": 0.0, "relbias_nde": 0.0,
                             "relbias_te": 0.0, "relbias_mp": 0.0}]
    cfg.write_text("bogus = 1\n")
    assert main(["bias", "--config", str(cfg)]) == 2


def test_json_and_csv_agree(capsys, sim_files, tmp_path):
    m, v = sim_files
    base = ["fit", "--main", m, "--validation", v, "--schema", "covariates=w", "--method", "orc2,rrc"]
    assert main(base + ["--out", str(tmp_path / "f.csv")]) == 0
    assert main(base + ["--format", "json", "--out", str(tmp_path / "f.json")]) == 0
    capsys.readouterr()
    rows_csv = list(csv.DictReader((tmp_path / "f.csv").open()))
    rows_json = json.loads((tmp_path / "f.json").read_text())["rows"]
    for rc, rj in zip(rows_csv, rows_json):
        for k, val in rj.items():
            if k == "method":
                assert rc[k] == val
            else:
                assert float(rc[k]) == pytest.approx(val, rel=1e-12)


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    r = subprocess.run([sys.executable, "-m", "survmed", "bias", "--gamma1", "1", "--rho", "0", "--mp-grid", "0.5"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("gamma1,rho,mp")
