import json

import pytest

from fedscape.cli import main
from fedscape.metrics import csv_to_rows

TINY = ["--override", "data.n_scenes=48", "--override", "data.image_size=8", "--override", "rounds=2",
        "--override", "model.channels=[2,3,4]", "--override", "model.hidden=6"]


def test_missing_config_exit_2(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "gone.json"), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr()
    assert "gone.json" in err.err and err.out == ""


def test_unknown_override_exit_2(tmp_path, capsys):
    assert main(["run", "--out", str(tmp_path), "--override", "strategy.colour=1"]) == 2
    assert "strategy.colour" in capsys.readouterr().err


def test_usage_error_exit_2(capsys):
    assert main(["run", "--seed", "abc"]) == 2


def test_minimal_run(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"mode": "FL", "rounds": 2, "data": {"n_scenes": 48, "image_size": 8},
                               "model": {"channels": [2, 3, 4], "hidden": 6}}))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "3"]) == 0
    out = tmp_path / "o"
    assert {p.name for p in out.iterdir()} >= {"result.json", "result.csv"}
    doc = json.loads((out / "result.json").read_text())
    assert doc["config"]["seeds"] == {"data": 3, "model": 3, "run": 3}
    assert "FedAvg" in capsys.readouterr().out


def test_root_scope_shrinks_payload(tmp_path):
    assert main(["run", "--out", str(tmp_path / "full")] + TINY) == 0
    assert main(["run", "--out", str(tmp_path / "root"), "--override", "strategy.scope=ROOT"] + TINY) == 0
    full = csv_to_rows((tmp_path / "full" / "result.csv").read_text())[0]
    root = csv_to_rows((tmp_path / "root" / "result.csv").read_text())[0]
    assert root["payload_bytes"] < full["payload_bytes"]


def test_runtime_error_exit_3(tmp_path, monkeypatch, capsys):
    import fedscape.harness as h

    def boom(*a, **k):
        raise RuntimeError("disk on fire")
    monkeypatch.setattr(h, "run_experiment", boom)
    assert main(["run", "--out", str(tmp_path)] + TINY) == 3
    assert "disk on fire" in capsys.readouterr().err


def _sweep(tmp_path, spec):
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps(spec))
    return path


def test_sweep_two_by_two(tmp_path):
    spec = _sweep(tmp_path, {"strategies": ["AVG", "PROX"], "scopes": ["FULL", "ROOT"]})
    assert main(["sweep", "--sweep", str(spec), "--out", str(tmp_path / "s")] + TINY) == 0
    rows = csv_to_rows((tmp_path / "s" / "sweep.csv").read_text())
    assert [r["method"] for r in rows] == ["FedAvg", "FedRootAvg", "FedProx", "FedRootProx"]


def test_one_cell_sweep_equals_run(tmp_path):
    spec = _sweep(tmp_path, {})
    assert main(["sweep", "--sweep", str(spec), "--out", str(tmp_path / "s")] + TINY) == 0
    assert main(["run", "--out", str(tmp_path / "r")] + TINY) == 0
    sweep_csv = (tmp_path / "s" / "sweep.csv").read_text()
    assert sweep_csv == (tmp_path / "r" / "result.csv").read_text()


def test_full_fl_grid(tmp_path):
    spec = _sweep(tmp_path, {"strategies": ["AVG", "BN", "PROX", "OPT", "DISTILL"], "scopes": ["FULL", "ROOT"],
                             "clients": [2, 10]})
    assert main(["sweep", "--sweep", str(spec), "--out", str(tmp_path / "g")] + TINY) == 0
    assert len(csv_to_rows((tmp_path / "g" / "sweep.csv").read_text())) == 20


def test_sweep_skips_lgr_outside_root_avg(tmp_path):
    spec = _sweep(tmp_path, {"strategies": ["AVG", "PROX"], "scopes": ["FULL", "ROOT"], "cl_methods": ["LGR"]})
    assert main(["sweep", "--sweep", str(spec), "--out", str(tmp_path / "s"), "--override", "mode=FCL",
                 "--override", "rounds_per_task=1"] + TINY) == 0
    rows = csv_to_rows((tmp_path / "s" / "sweep.csv").read_text())
    assert {r["method"] for r in rows} == {"FedLGR"}


def test_failed_cell_exit_1(tmp_path):
    # EWC is rejected in FL mode; the cell fails, the sweep carries on
    spec = _sweep(tmp_path, {"cl_methods": ["NONE", "EWC"]})
    assert main(["sweep", "--sweep", str(spec), "--out", str(tmp_path / "s")] + TINY) == 1
    assert len(csv_to_rows((tmp_path / "s" / "sweep.csv").read_text())) == 1
    failures = json.loads((tmp_path / "s" / "failures.json").read_text())
    assert failures[0]["cell"].startswith("AVG-FULL-EWC")


def test_bad_sweep_key(tmp_path):
    spec = _sweep(tmp_path, {"strategy": ["AVG"]})
    assert main(["sweep", "--sweep", str(spec), "--out", str(tmp_path)]) == 2


def test_gen_data_and_report(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--n-scenes", "12", "--image-size", "8"]) == 0
    assert (tmp_path / "d" / "scenes.csv").is_file() and (tmp_path / "d" / "manifest.json").is_file()
    assert main(["run", "--out", str(tmp_path / "r")] + TINY) == 0
    capsys.readouterr()
    assert main(["report", "--input", str(tmp_path / "r" / "result.json")]) == 0
    assert capsys.readouterr().out == (tmp_path / "r" / "result.csv").read_text()


def test_gen_data_rejects_size(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--image-size", "12"]) == 2


def test_verify_pristine_and_fault(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "14/14 checks passed" in out
    assert main(["verify", "--inject-fault", "unweighted-mean"]) == 1
    out = capsys.readouterr().out
    assert "FAIL  weighted_mean" in out
