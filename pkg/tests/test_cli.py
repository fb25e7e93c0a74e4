from __future__ import annotations

import json

import pytest

from apnea_kit.cli import main


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--out", str(d), "--subjects", "4", "--nights", "1", "--hours", "0.5", "--seed", "2"]) == 0
    return d


def test_synth_json_output(tmp_path, capsys):
    assert main(["--json", "synth", "--out", str(tmp_path / "x"), "--subjects", "1", "--nights", "1", "--hours", "0.2"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["recordings"] == 1


def test_bad_synth_spec_exits_1(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--hours", "0.01"]) == 1
    assert "config error" in capsys.readouterr().err


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["predict"])
    assert exc.value.code == 1


def test_autolabel_and_skip_bad(data_dir, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("APNEA_KIT_DATA", str(data_dir))
    assert main(["autolabel"]) == 0
    assert (data_dir / "S000_N1" / "annotations.auto3.json").exists()
    report = json.loads((data_dir / "autolabel_report.json").read_text())
    assert len(report["recordings"]) == 4
    bad = tmp_path / "bad" / "B1"
    bad.mkdir(parents=True)
    (bad / "meta.json").write_text('{"subject_id": "B", "recording_id": "B1"}')
    (bad / "respiration.csv").write_text("nope\n")
    assert main(["autolabel", "--data", str(tmp_path / "bad")]) == 1
    assert main(["autolabel", "--data", str(tmp_path / "bad"), "--skip-bad"]) == 0
    assert "skipped" in capsys.readouterr().err


def test_missing_data_dir_exit_1(monkeypatch, capsys):
    monkeypatch.delenv("APNEA_KIT_DATA", raising=False)
    assert main(["autolabel"]) == 1


def test_extract_writes_manifest(data_dir, tmp_path):
    out = tmp_path / "feat"
    assert main(["extract", "--data", str(data_dir), "--flavor", "RespOnly", "--out", str(out)]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["registry_size"] == 214 and len(man["recordings"]) == 4
    assert (out / "S000_N1" / "features.csv").read_text().split("\n")[0].split(",")[1:] == man["registry"]


def test_extract_data_error_exit_2(tmp_path):
    d = tmp_path / "d" / "X"
    d.mkdir(parents=True)
    (d / "meta.json").write_text('{"subject_id": "X", "recording_id": "X"}')
    (d / "respiration.csv").write_text("t_s,value\n0,1\n0.1,2\n")
    assert main(["extract", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "o")]) == 2


def test_run_predict_report(data_dir, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "k_folds": 3, "n_trees": 4, "train_stride_s": 10, "top_k": 1, "flavors": ["RespOnly", "Spo2Only"],
        "grid": {"min_samples_split": [50], "neg_subsample_ratio": [2.0], "class_weight_pos": [1.0]},
        "selection": {"enabled": False},
    }))
    args = ["--config", str(cfg), "run", "--data", str(data_dir), "--out", str(tmp_path / "runs")]
    assert main(args) == 0
    out = capsys.readouterr().out
    run_dir = next((tmp_path / "runs").glob("run-*"))
    assert "RespOnly" in out and str(run_dir) in out
    model = run_dir / "fold0" / "RespOnly" / "model.json"
    assert main(["--json", "predict", "--model", str(model), "--bundle", str(data_dir / "S001_N1"), "--out", str(tmp_path / "ev.json")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["category"] in ("Normal", "Mild", "Moderate", "Severe") and doc["ahi"] >= 0
    assert json.loads((tmp_path / "ev.json").read_text())["n_events"] == doc["n_events"]
    summary = (run_dir / "summary.json").read_bytes()
    assert main(["report", "--run", str(run_dir)]) == 0
    assert (run_dir / "summary.json").read_bytes() == summary


def test_empty_grid_rejected_before_compute(data_dir, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"grid": {"class_weight_pos": []}}))
    assert main(["run", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path / "runs")]) == 1
    assert "empty" in capsys.readouterr().err
    assert not (tmp_path / "runs").exists()


def test_corrupt_model_exit_2(data_dir, tmp_path, capsys):
    m = tmp_path / "m.json"
    m.write_text('{"schema_version": 1, "kind": "forest", "trees": [')
    assert main(["predict", "--model", str(m), "--bundle", str(data_dir / "S000_N1")]) == 2
    assert "truncated" in capsys.readouterr().err
