import json
import subprocess
import sys

import pytest

from tbps.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main


def test_gen_train_eval(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["gen", "--seed", "0", "--out", str(data)]) == EXIT_OK
    world = data / "world.jsonl"
    assert world.exists()
    assert main(["train", "--data", str(world), "--steps", "12",
                 "--out", str(tmp_path / "train")]) == EXIT_OK
    assert (tmp_path / "train" / "curves.csv").exists()
    assert (tmp_path / "train" / "checkpoint" / "state.npz").exists()
    capsys.readouterr()
    assert main(["eval", "--data", str(world), "--beta", "0.5", "--gallery", "100",
                 "--out", str(tmp_path / "eval")]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert 0 < summary["mAP"] <= 1
    preds = tmp_path / "eval" / "predictions.jsonl"
    assert main(["eval", "--predictions", str(preds), "--out", str(tmp_path / "again")]) == EXIT_OK
    again = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert again["mAP"] == summary["mAP"]


def test_sweep_beta_with_overrides(tmp_path):
    out = tmp_path / "sweep"
    rc = main(["sweep-beta", "--seed", "0", "--beta", "0,1", "--gallery", "50", "--out", str(out)])
    assert rc == EXIT_OK
    lines = (out / "results.csv").read_text().splitlines()
    assert len(lines) == 3


def test_config_file_sets_grid(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"betas": [0.5], "galleries": [50], "seeds": [2]}))
    assert main(["sweep-gallery", "--config", str(cfg), "--out", str(tmp_path / "g")]) == EXIT_OK
    lines = (tmp_path / "g" / "results.csv").read_text().splitlines()
    assert len(lines) == 2 and ",2,0.500000,50," in lines[1]


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"mu": -1}))
    assert main(["sweep-beta", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "mu" in capsys.readouterr().err
    bad.write_text("{not json")
    assert main(["eval", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["eval", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["sweep-beta", "--beta", "2", "--out", str(tmp_path / "y")]) == EXIT_CONFIG
    assert "betas" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["sweep-beta", "--beta", "abc"])


def test_runtime_errors(tmp_path, capsys):
    (tmp_path / "f").write_text("")
    rc = main(["sweep-beta", "--seed", "0", "--gallery", "50", "--out", str(tmp_path / "f")])
    assert rc in (EXIT_RUNTIME, EXIT_CONFIG)
    assert capsys.readouterr().err


def test_gradcheck_and_selftest(capsys):
    assert main(["gradcheck", "--points", "3"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") == 6
    assert main(["selftest"]) == EXIT_OK


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "tbps", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("tbps ")
