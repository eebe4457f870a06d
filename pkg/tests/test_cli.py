import hashlib
import json

import pytest

from ccil.cli import main
from ccil.dynamics import TrajectoryDataset
from ccil.labeler import read_labels


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    paths = {k: d / v for k, v in dict(demos="demos.jsonl", dyn="dyn.bin", labels="labels.jsonl",
                                          policy="policy.json", analysis="lip.json",
                                          evaluation="eval.json").items()}
    assert main(["collect", "--env", "wallgrasp", "--n", "10", "--seed", "7", "--out", str(paths["demos"])]) == 0
    assert main(["train-dynamics", "--data", str(paths["demos"]), "--seed", "0", "--epochs", "20",
                 "--out", str(paths["dyn"])]) == 0
    return d, paths


def test_collect_writes_successful_trajectories(pipeline):
    from ccil.envs import make_env
    _, paths = pipeline
    data = TrajectoryDataset.from_jsonl(paths["demos"])
    env = make_env("wallgrasp")
    assert data.n_trajectories == 10
    assert all(env.success(traj[-1].s_next) for traj in data.trajectories)


def test_gen_labels_accepted_fraction(pipeline):
    _, paths = pipeline
    before = {k: _digest(paths[k]) for k in ("demos", "dyn")}
    assert main(["gen-labels", "--model", str(paths["dyn"]), "--data", str(paths["demos"]),
                 "--quantile", "0.8", "--out", str(paths["labels"])]) == 0
    labels = read_labels(paths["labels"])
    n_acc = sum(lab.accepted for lab in labels)
    assert abs(n_acc - 0.8 * len(labels)) <= 1
    assert before == {k: _digest(paths[k]) for k in ("demos", "dyn")}


def test_downstream_stages(pipeline):
    _, paths = pipeline
    if not paths["labels"].exists():
        main(["gen-labels", "--model", str(paths["dyn"]), "--data", str(paths["demos"]),
              "--quantile", "0.8", "--out", str(paths["labels"])])
    inputs = {k: _digest(paths[k]) for k in ("demos", "dyn", "labels")}
    assert main(["analyze-continuity", "--model", str(paths["dyn"]), "--data", str(paths["demos"]),
                 "--out", str(paths["analysis"])]) == 0
    analysis = json.loads(paths["analysis"].read_text())
    assert analysis["contact_split"]["n_contact"] > 0
    assert main(["train-policy", "--data", str(paths["demos"]), "--labels", str(paths["labels"]),
                 "--seed", "1", "--epochs", "5", "--out", str(paths["policy"])]) == 0
    assert main(["evaluate", "--env", "wallgrasp", "--policy", str(paths["policy"]), "--seed", "2",
                 "--trials", "30", "--out", str(paths["evaluation"])]) == 0
    record = json.loads(paths["evaluation"].read_text())
    assert record["trials"] == 30 and len(record["per_trial"]) == 30
    assert inputs == {k: _digest(paths[k]) for k in ("demos", "dyn", "labels")}


def test_ablate_and_report(tmp_path):
    cfg = tmp_path / "grid.json"
    cfg.write_text(json.dumps({"env": "pendulum", "sizes": [2], "quantiles": [0.0, 0.5], "caps": [None],
                               "trials": 30, "seeds": [0], "dynamics": {"epochs": 10},
                               "policy": {"epochs": 10}}))
    digest = _digest(cfg)
    out = tmp_path / "report"
    assert main(["ablate", "--config", str(cfg), "--out", str(out)]) == 0
    assert {"report.json", "cells.csv", "label_cdf_n2_Kinf.csv", "lipschitz_summary.csv"} <= {
        p.name for p in out.iterdir()}
    assert len((out / "cells.csv").read_text().strip().splitlines()) == 1 + 2
    assert main(["report", "--report", str(out / "report.json"), "--out", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "report.json").read_bytes() == (out / "report.json").read_bytes()
    assert _digest(cfg) == digest


@pytest.mark.parametrize("argv", [
    ["collect", "--env", "wallgrasp", "--n", "3", "--out", "x.jsonl"],
    ["train-dynamics", "--data", "d.jsonl", "--out", "m.bin"],
    ["train-policy", "--data", "d.jsonl", "--out", "p.json"],
    ["evaluate", "--env", "pendulum", "--policy", "p.json"],
])
def test_missing_seed_is_usage_error(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2
    assert "--seed" in capsys.readouterr().err


def test_unknown_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["collect", "--env", "pendulum", "--n", "1", "--seed", "0", "--out", "x", "--bogus"])
    assert exc.value.code == 2
    assert "--bogus" in capsys.readouterr().err


def test_distinct_error_messages(tmp_path, capsys):
    codes = {}
    codes["env"] = main(["collect", "--env", "mars", "--n", "1", "--seed", "0", "--out", str(tmp_path / "a")])
    err_env = capsys.readouterr().err
    codes["missing"] = main(["train-dynamics", "--data", str(tmp_path / "nope.jsonl"), "--seed", "0",
                             "--out", str(tmp_path / "m.bin")])
    err_missing = capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"trials": 5}))
    codes["config"] = main(["ablate", "--config", str(bad), "--out", str(tmp_path / "r")])
    err_config = capsys.readouterr().err
    codes["io"] = main(["collect", "--env", "pendulum", "--n", "1", "--seed", "0",
                        "--out", str(tmp_path / "no" / "dir" / "x.jsonl")])
    err_io = capsys.readouterr().err
    assert codes == {"env": 3, "missing": 3, "config": 4, "io": 7}
    assert "unknown environment" in err_env
    assert "not found" in err_missing
    assert "trials" in err_config
    assert "does not exist" in err_io
    assert len({err_env, err_missing, err_config, err_io}) == 4


def test_schema_violation(tmp_path, capsys):
    bad = tmp_path / "demos.jsonl"
    bad.write_text('{"traj": 0}\n')
    assert main(["train-dynamics", "--data", str(bad), "--seed", "0", "--out", str(tmp_path / "m.bin")]) == 3
    assert "bad transition" in capsys.readouterr().err
