import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from ftgmm import cli
from ftgmm.data import load_csv


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert cli.main(["synth", "--n", "5", "--K", "5", "--size", "250", "--seed", "0", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def fitted(synth, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    t0 = time.perf_counter()
    rc = cli.main(["fit", str(synth / "samples.csv"), "--truth", str(synth / "truth.json"), "--out", str(out)])
    return out, rc, time.perf_counter() - t0


def _read(path):
    return json.loads(path.read_text())


def test_synth_outputs(synth):
    X = load_csv(synth / "samples.csv")
    truth = _read(synth / "truth.json")
    assert X.shape == (250, 5)
    assert truth["format"] == "ftgmm.true_model" and truth["K"] == 5


def test_fit_outputs(fitted):
    out, rc, seconds = fitted
    assert rc == 0 and seconds < 60
    report = _read(out / "report.json")
    assert len(report["test_avg_nll"]) == 100
    rows = list(csv.reader((out / "trace.csv").open()))
    assert rows[0] == ["epoch", "nll", "seconds"] and len(rows) == 101
    assert float(rows[-1][1]) == report["test_avg_nll"][-1]
    assert report["cov_err"] is not None
    assert report["config"]["eta_max"] == 0.05


def test_eval_reproduces_training_trace(synth, fitted, tmp_path):
    out, _, _ = fitted
    metrics = tmp_path / "m.json"
    rc = cli.main(["eval", str(out / "checkpoint.json"), str(synth / "samples.csv"), "--split", "train", "--out", str(metrics)])
    assert rc == 0
    report = _read(out / "report.json")
    assert abs(_read(metrics)["avg_nll"] - report["train_avg_nll"][-1]) <= 1e-9


def test_eval_test_split_and_truth(synth, fitted, tmp_path):
    out, _, _ = fitted
    metrics = tmp_path / "m.json"
    cli.main(["eval", str(out / "checkpoint.json"), str(synth / "samples.csv"), "--truth", str(synth / "truth.json"),
              "--out", str(metrics)])
    m, report = _read(metrics), _read(out / "report.json")
    assert abs(m["avg_nll"] - report["test_avg_nll"][-1]) <= 1e-9
    assert m["cov_err"] == pytest.approx(report["cov_err"], rel=1e-12)
    assert m["true_avg_nll"] == pytest.approx(report["true_test_avg_nll"], rel=1e-12)
    assert m["n_points"] == 50


def test_determinism(synth, tmp_path):
    reports = []
    for name in ("a", "b"):
        cli.main(["fit", str(synth / "samples.csv"), "--epochs", "3", "--out", str(tmp_path / name)])
        r = _read(tmp_path / name / "report.json")
        r.pop("epoch_seconds")
        reports.append(json.dumps(r, sort_keys=True))
    assert reports[0] == reports[1]


def test_config_echo_reruns(synth, tmp_path):
    cli.main(["fit", str(synth / "samples.csv"), "--method", "adam-euclidean-plu", "--epochs", "3", "--seed", "4",
              "--out", str(tmp_path / "a")])
    cfg = _read(tmp_path / "a" / "report.json")["config"]
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    cli.main(["fit", str(synth / "samples.csv"), "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "b")])
    a, b = _read(tmp_path / "a" / "report.json"), _read(tmp_path / "b" / "report.json")
    assert a["train_objective"] == b["train_objective"] and b["config"]["mode"] == "plu"


def test_flags_override_config(synth, tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"epochs": 7, "batch_size": 8, "method": "acclip-euclidean"}))
    cli.main(["fit", str(synth / "samples.csv"), "--config", str(tmp_path / "cfg.json"), "--epochs", "2",
              "--lr", "0.02", "--out", str(tmp_path / "o")])
    cfg = _read(tmp_path / "o" / "report.json")["config"]
    assert (cfg["epochs"], cfg["batch_size"], cfg["eta_max"], cfg["mode"]) == (2, 8, 0.02, "unconstrained")


@pytest.mark.parametrize("flags, expect", [
    (["--optimizer", "adam"], ("adam", "manifold", "orthogonal")),
    (["--optimizer", "acclip-euclidean"], ("acclip", "euclidean", "unconstrained")),
    (["--mode", "plu"], ("acclip", "euclidean", "plu")),
    (["--retraction", "cayley"], ("acclip", "manifold", "orthogonal")),
])
def test_build_config_flags(flags, expect):
    args = cli.build_parser().parse_args(["fit", "x.csv", "--out", "o", *flags])
    c = cli.build_config(args)
    assert (c.optimizer, c.geometry, c.mode) == expect


def test_unparseable_config(synth, tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"epochs": 5,\n')
    rc = cli.main(["fit", str(synth / "samples.csv"), "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)])
    assert rc == 2
    assert "line 2" in capsys.readouterr().err


def test_unknown_field(synth, tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"epochz": 5}')
    rc = cli.main(["fit", str(synth / "samples.csv"), "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)])
    assert rc == 2 and "epochz" in capsys.readouterr().err


def test_inconsistent_config(synth, tmp_path):
    rc = cli.main(["fit", str(synth / "samples.csv"), "--mode", "plu", "--geometry", "manifold", "--out", str(tmp_path)])
    assert rc == 2


def test_dimension_mismatch(synth, tmp_path, capsys):
    X = load_csv(synth / "samples.csv")[:, :3]
    np.savetxt(tmp_path / "x3.csv", X, delimiter=",")
    rc = cli.main(["fit", str(tmp_path / "x3.csv"), "--truth", str(synth / "truth.json"), "--out", str(tmp_path)])
    assert rc == 2 and "dimension" in capsys.readouterr().err


def test_eval_dimension_mismatch(fitted, tmp_path):
    out, _, _ = fitted
    np.savetxt(tmp_path / "x3.csv", np.zeros((250, 3)), delimiter=",")
    assert cli.main(["eval", str(out / "checkpoint.json"), str(tmp_path / "x3.csv")]) == 2


def test_numeric_failure_exit_code(synth, tmp_path, capsys):
    rc = cli.main(["fit", str(synth / "samples.csv"), "--method", "acclip-euclidean", "--lr", "1e4", "--epochs", "2",
                   "--out", str(tmp_path)])
    assert rc == 1
    assert "numeric failure" in capsys.readouterr().err
    assert _read(tmp_path / "report.json")["status"].startswith("failed")


def test_missing_data_file(tmp_path):
    assert cli.main(["fit", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 2


def test_bench_single_cell_is_fit_plus_eval(tmp_path):
    sweep = {"separations": [1.0], "sizes": [250], "methods": ["acclip-manifold"], "seeds": [0],
             "config": {"epochs": 5}}
    (tmp_path / "sweep.json").write_text(json.dumps(sweep))
    assert cli.main(["bench", str(tmp_path / "sweep.json"), "--out", str(tmp_path / "b"), "--quiet"]) == 0
    runs = list(csv.DictReader((tmp_path / "b" / "runs.csv").open()))
    table = list(csv.DictReader((tmp_path / "b" / "table.csv").open()))
    assert len(runs) == 1 and len(table) == 1

    cli.main(["synth", "--n", "5", "--K", "5", "--c", "1", "--size", "250", "--seed", "0", "--out", str(tmp_path / "d")])
    cli.main(["fit", str(tmp_path / "d" / "samples.csv"), "--epochs", "5", "--out", str(tmp_path / "f")])
    cli.main(["eval", str(tmp_path / "f" / "checkpoint.json"), str(tmp_path / "d" / "samples.csv"),
              "--truth", str(tmp_path / "d" / "truth.json"), "--out", str(tmp_path / "m.json")])
    m = _read(tmp_path / "m.json")
    assert float(runs[0]["test_avg_nll"]) == m["avg_nll"]
    assert float(runs[0]["cov_err"]) == pytest.approx(m["cov_err"], rel=1e-12)
    assert float(table[0]["test_avg_nll"]) == float(runs[0]["test_avg_nll"])


def test_bench_aggregates_over_seeds():
    rows = [
        {"separation": 1.0, "size": 10, "method": "m", "seed": s, "status": "ok", "test_avg_nll": float(s),
         "true_test_avg_nll": 0.0, "cov_err": 1.0, "mean_err": 0.0, "seconds": 1.0}
        for s in range(3)
    ]
    rows.append(dict(rows[0], seed=3, status="failed", test_avg_nll=float("nan")))
    (entry,) = cli.aggregate(rows)
    assert entry["test_avg_nll"] == 1.0 and entry["runs"] == 4 and entry["failures"] == 1


@pytest.mark.parametrize("sweep", [{"methods": ["nope"]}, {"colour": 1}, {"sizes": []}, []])
def test_bad_sweep(sweep):
    with pytest.raises(cli.ConfigError):
        cli.parse_sweep(sweep)


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ftgmm", "synth", "--size", "20", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and (tmp_path / "samples.csv").exists()
