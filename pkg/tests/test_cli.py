import json

import numpy as np
import pytest

from distimp.cli import main
from distimp.data import load_dataset, write_dataset
from distimp.simulation import preset, simulate_trial


@pytest.fixture
def data_file(tmp_path):
    path = tmp_path / "trial.csv"
    write_dataset(simulate_trial(preset("j2r-ate"), 21, N=120), path)
    return path


def test_fit_writes_json(tmp_path, data_file, capsys):
    out = tmp_path / "fit.json"
    assert main(["fit", "--input", str(data_file), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["config"]["input"] == str(data_file)
    assert len(doc["fit"]["beta"]["1"]) == 5
    assert "loglik" in capsys.readouterr().out


def test_analyze_di_smoke(tmp_path, data_file):
    code = main(["analyze", "--input", str(data_file), "--model", "j2r", "--estimand", "ate-ancova",
                 "--method", "di", "--M", "10", "--B", "10", "--out-dir", str(tmp_path)])
    assert code == 0
    doc = json.loads((tmp_path / "analysis.json").read_text())
    res = doc["results"][0]
    for key in ("tau_hat", "se", "ci", "p_value", "variance"):
        assert key in res
    assert res["method"] == "DI-weighted-bootstrap"
    assert doc["config"]["seed"] == 0 and doc["config"]["model"] == "j2r"


def test_analyze_is_deterministic(tmp_path, data_file):
    args = ["analyze", "--input", str(data_file), "--method", "both", "--M", "5", "--B", "5",
            "--estimand", "qte:0.5", "--seed", "4"]
    main(args + ["--out-dir", str(tmp_path / "a")])
    main(args + ["--out-dir", str(tmp_path / "b")])
    assert (tmp_path / "a" / "analysis.json").read_bytes() == (tmp_path / "b" / "analysis.json").read_bytes()


def test_config_file_and_flag_precedence(tmp_path, data_file):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# analysis settings\nmodel = rtb\nM = 4\nB = 3\nestimand = risk:4.5, ate\n")
    main(["analyze", "--config", str(cfg), "--input", str(data_file), "--M", "6", "--out-dir", str(tmp_path)])
    doc = json.loads((tmp_path / "analysis.json").read_text())
    assert doc["config"]["model"] == "rtb"
    assert doc["config"]["M"] == 6
    assert [r["estimand"] for r in doc["results"]] == ["risk:4.5", "ate"]


def test_config_rejects_foreign_keys(tmp_path, capsys):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("input = trial.csv\n")
    assert main(["simulate", "--config", str(cfg)]) != 0
    assert "input" in capsys.readouterr().err


def test_cdf_output(tmp_path, data_file):
    main(["analyze", "--input", str(data_file), "--estimand", "cdf:-5:15:21", "--M", "4", "--B", "3",
          "--out-dir", str(tmp_path)])
    for g in (1, 2):
        rows = [line for line in (tmp_path / f"cdf_group{g}.csv").read_text().splitlines()
                if not line.startswith("#")]
        assert rows[0] == "t,F" and len(rows) == 22
        F = np.array([float(r.split(",")[1]) for r in rows[1:]])
        assert np.all(np.diff(F) >= 0)


def test_impute_emits_completed_files(tmp_path, data_file):
    out = tmp_path / "imp"
    assert main(["impute", "--input", str(data_file), "--model", "mar", "--M", "3", "--emit", "2",
                 "--out-dir", str(out)]) == 0
    ds = load_dataset(out / "completed_m2.csv")
    assert ds.r.all()
    doc = json.loads((out / "imputation.json").read_text())
    assert doc["config"]["emit"] == [2]


def test_impute_reuses_fit(tmp_path, data_file):
    main(["fit", "--input", str(data_file), "--out", str(tmp_path / "f.json")])
    a, b = tmp_path / "a", tmp_path / "b"
    main(["impute", "--input", str(data_file), "--M", "3", "--out-dir", str(a)])
    main(["impute", "--input", str(data_file), "--M", "3", "--fit", str(tmp_path / "f.json"), "--out-dir", str(b)])
    fa = json.loads((a / "imputation.json").read_text())["imputation_fingerprint"]
    fb = json.loads((b / "imputation.json").read_text())["imputation_fingerprint"]
    assert fa == fb


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["analyze", "--input", str(tmp_path / "missing.csv")]) != 0
    assert "error" in capsys.readouterr().err
    bad = tmp_path / "bad.csv"
    bad.write_text("x1,group,y1,y2,y3\n0,1,1,,2\n0,2,1,1,1\n")
    assert main(["fit", "--input", str(bad)]) != 0
    assert "non-monotone" in capsys.readouterr().err
    assert main(["analyze"]) != 0


def test_help_documents_models(capsys):
    with pytest.raises(SystemExit):
        main(["analyze", "--help"])
    text = capsys.readouterr().out
    for word in ("jump to reference", "return to baseline", "washout", "control covariance"):
        assert word in text


def test_simulate_parallel_matches_serial(tmp_path):
    base = ["simulate", "--preset", "j2r-ate", "--N", "60", "--M", "4", "--B", "5", "--reps", "4", "--seed", "3"]
    main(base + ["--workers", "1", "--out", str(tmp_path / "s.csv")])
    main(base + ["--workers", "2", "--out", str(tmp_path / "p.csv")])
    assert (tmp_path / "s.csv").read_bytes() == (tmp_path / "p.csv").read_bytes()
