import os

import pytest

from tbps.errors import PreconditionError
from tbps.experiment import ExperimentConfig, read_results, run_experiment, summarize_rows
from tbps.pipeline import Toggles


def _cfg(tmp_path, name, **kw):
    base = dict(betas=[0.0, 0.5], galleries=[50, 100], seeds=[0, 1], out_dir=str(tmp_path / name))
    base.update(kw)
    return ExperimentConfig(**base)


def test_rows_and_order(tmp_path):
    summary = run_experiment(_cfg(tmp_path, "a"))
    rows = read_results(tmp_path / "a" / "results.csv")
    assert len(rows) == 2 * 2 * 2
    keys = [(r["beta"], int(r["gallery_size"]), int(r["seed"])) for r in rows]
    assert keys == sorted(keys)
    assert len({r["exp_id"] for r in rows}) == len(rows)
    assert len({r["config_hash"] for r in rows}) == 1
    assert len(summary["points"]) == 4 and all(p["n_seeds"] == 2 for p in summary["points"])
    assert (tmp_path / "a" / "timings.csv").exists()
    assert (tmp_path / "a" / "summary.json").exists()


def test_subset_rerun_reproduces_rows(tmp_path):
    run_experiment(_cfg(tmp_path, "full"))
    run_experiment(_cfg(tmp_path, "sub", betas=[0.5], galleries=[100], seeds=[1]))
    full = read_results(tmp_path / "full" / "results.csv")
    (sub,) = read_results(tmp_path / "sub" / "results.csv")
    match = [r for r in full if r["exp_id"] == sub["exp_id"]]
    assert match == [sub]


def test_byte_identical_across_runs_and_jobs(tmp_path):
    run_experiment(_cfg(tmp_path, "j1"))
    run_experiment(_cfg(tmp_path, "j1b"))
    run_experiment(_cfg(tmp_path, "j4", jobs=4))
    a = (tmp_path / "j1" / "results.csv").read_bytes()
    assert a == (tmp_path / "j1b" / "results.csv").read_bytes()
    assert a == (tmp_path / "j4" / "results.csv").read_bytes()


def test_config_round_trip_and_hash():
    cfg = ExperimentConfig(toggles=[Toggles(pud=False)], betas=[0.3])
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert again.config_hash() == cfg.config_hash()
    # grid coordinates do not enter the hash, model settings do
    assert ExperimentConfig(betas=[0.9], seeds=[3]).config_hash() == ExperimentConfig().config_hash()
    assert ExperimentConfig(mu=0.7).config_hash() != ExperimentConfig().config_hash()


@pytest.mark.parametrize("bad, field", [({"betas": [1.5]}, "betas"), ({"galleries": [0]}, "galleries"),
                                         ({"jobs": 0}, "jobs"), ({"seeds": []}, "seeds"),
                                         ({"colour": 1}, "colour"), ({"gen": {"dim": -1}}, "dim")])
def test_config_errors_name_the_field(bad, field):
    with pytest.raises(PreconditionError, match=field):
        ExperimentConfig.from_dict(bad)


@pytest.mark.skipif(os.geteuid() == 0, reason="root can write anywhere")
def test_unwritable_output(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(0o500)
    with pytest.raises(PreconditionError, match="not writable"):
        run_experiment(_cfg(tmp_path, "ro/sub"))


def test_output_path_is_a_file(tmp_path):
    (tmp_path / "file").write_text("x")
    with pytest.raises(PreconditionError, match="not writable"):
        run_experiment(_cfg(tmp_path, "file"))


def test_summarize_rows_means():
    rows = [{"toggles": "t", "beta": "0.5", "gallery_size": "10", "mAP": m, "top1": 0, "top5": 0,
             "top10": 0, "db_image": 1, "db_text": 1} for m in ("0.2", "0.4")]
    (p,) = summarize_rows(rows)["points"]
    assert p["mAP"] == pytest.approx(0.3) and p["n_seeds"] == 2
