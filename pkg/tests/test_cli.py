import hashlib
import json
import os

import numpy as np
import pytest

from utils.model import load_checkpoint
from conftest import grid_file

SHORT = ["--t-label", "2", "--settle-window", "0.5"]
TINY = ["--gc-layers", "1", "--gc-width", "3", "--fc-width", "8", "--blocks", "2",
        "--filters", "4", "--mlp-hidden", "4", "--batch-size", "8"]


def sha256(path):
    with open(path, "rb") as handle:
        return hashlib.sha256(handle.read()).hexdigest()


def manifests(tmp_path, subcommand):
    run_dir = tmp_path / "runs"
    return sorted(run_dir / f for f in os.listdir(run_dir) if f"-{subcommand}" in f)


@pytest.fixture
def dataset(cli, tmp_path):
    path = tmp_path / "pair.ttds"
    code = cli(["generate", grid_file("two_node"), "--out", str(path), "--per-node", "20",
                "--window", "11", "--seed", "3", *SHORT])
    assert code == 0
    return path


@pytest.fixture
def checkpoint(cli, tmp_path, dataset, capsys):
    path = tmp_path / "pair.ttnn"
    code = cli(["train", "--grid", grid_file("two_node"), "--data", str(dataset), "--out", str(path),
                "--epochs", "2", *TINY])
    assert code == 0
    return path


def test_gridinfo_ieee39(cli, capsys):
    assert cli(["gridinfo", grid_file("ieee39")]) == 0
    out = capsys.readouterr().out
    assert "N=39 E=46 connected" in out
    assert "Validation: ok" in out


def test_gridinfo_invalid_file_exits_2(cli, tmp_path, capsys):
    path = tmp_path / "bad.grid"
    path.write_text('{"version": 1, "nodes": [{"id": 0, "alpha": -1, "power": 0}], "edges": []}', encoding="utf-8")
    assert cli(["gridinfo", str(path)]) == 2
    assert capsys.readouterr().out.startswith("Error:")


def test_gridinfo_missing_file_exits_2(cli, tmp_path):
    assert cli(["gridinfo", str(tmp_path / "nope.grid")]) == 2


def test_gridinfo_dumps_topology_adjacency(cli, capsys):
    assert cli(["gridinfo", grid_file("two_node"), "--adjacency", "1"]) == 0
    out = capsys.readouterr().out.splitlines()
    start = out.index("B (variant TOPOLOGY):")
    assert out[start + 1:start + 3] == ["1,1", "1,1"]
    assert out[start + 3] == "B' (renormalized):"


def test_simulate_writes_trajectory(cli, tmp_path, capsys):
    out = tmp_path / "traj.csv"
    code = cli(["simulate", grid_file("two_node"), "--node", "0", "--kick", "0.5",
                "--t-end", "0.125", "--out", str(out), *SHORT])
    assert code == 0
    text = capsys.readouterr().out
    assert "Kick on node 0: delta_omega = +0.5 rad/s" in text
    assert "Verdict: " in text
    assert len(out.read_text(encoding="utf-8").splitlines()) == 1 + 11


def test_simulate_rejects_unknown_node(cli):
    assert cli(["simulate", grid_file("two_node"), "--node", "5", *SHORT]) == 2


def test_generate_two_node(cli, tmp_path, capsys):
    out = tmp_path / "one.ttds"
    code = cli(["generate", grid_file("two_node"), "--out", str(out), "--per-node", "1", "--window", "11", *SHORT])
    assert code == 0
    assert "Generated 2 samples" in capsys.readouterr().out
    assert out.exists()
    [manifest] = manifests(tmp_path, "generate")
    record = json.loads(manifest.read_text(encoding="utf-8"))
    assert record["outputs"]["dataset"]["sha256"] == sha256(out)
    assert record["seeds"]["seed"] == 0


def test_generate_is_reproducible(cli, tmp_path):
    paths = [tmp_path / "a.ttds", tmp_path / "b.ttds"]
    for path in paths:
        assert cli(["generate", grid_file("two_node"), "--out", str(path), "--per-node", "4",
                    "--window", "11", "--seed", "9", *SHORT]) == 0
    assert sha256(paths[0]) == sha256(paths[1])


def test_seed_comes_from_environment(cli, tmp_path, monkeypatch):
    monkeypatch.setenv("SYNCHRONY_SEED", "9")
    env = tmp_path / "env.ttds"
    flag = tmp_path / "flag.ttds"
    assert cli(["generate", grid_file("two_node"), "--out", str(env), "--per-node", "4", "--window", "11", *SHORT]) == 0
    monkeypatch.delenv("SYNCHRONY_SEED")
    assert cli(["generate", grid_file("two_node"), "--out", str(flag), "--per-node", "4",
                "--window", "11", "--seed", "9", *SHORT]) == 0
    assert sha256(env) == sha256(flag)


def test_bad_environment_exits_2(cli, monkeypatch):
    monkeypatch.setenv("SYNCHRONY_THREADS", "many")
    assert cli(["gridinfo", grid_file("two_node")]) == 2


def test_train_writes_checkpoint_history_and_metrics(cli, tmp_path, capsys, checkpoint):
    out = capsys.readouterr().out
    assert "Splits: train=24 val=8 test=8" in out
    assert "Checkpoint written to" in out
    history = tmp_path / "pair.ttnn.history.csv"
    assert len(history.read_text(encoding="utf-8").splitlines()) == 3
    report = json.loads((tmp_path / "pair.ttnn.metrics.json").read_text(encoding="utf-8"))
    assert 0.0 <= report["acc"] <= 1.0
    assert report["split"] == "test"
    model = load_checkpoint(checkpoint)
    assert (model.config.n_nodes, model.config.window, model.config.gc_layers) == (2, 11, 1)
    assert model.config.dt == 0.0125
    index = json.loads((tmp_path / "pair.ttnn.splits.json").read_text(encoding="utf-8"))
    assert [len(index[name]) for name in ("train", "val", "test")] == [24, 8, 8]
    assert sorted(index["train"] + index["val"] + index["test"]) == list(range(40))


def test_zero_epochs_and_zero_lr_keep_the_initialization(cli, tmp_path, dataset):
    paths = {}
    for name, extra in [("init", ["--epochs", "0"]), ("frozen", ["--epochs", "2", "--lr", "0"])]:
        paths[name] = tmp_path / f"{name}.ttnn"
        assert cli(["train", "--grid", grid_file("two_node"), "--data", str(dataset),
                    "--out", str(paths[name]), *TINY, *extra]) == 0
    init, frozen = load_checkpoint(paths["init"]), load_checkpoint(paths["frozen"])
    for name, t in init.named_parameters():
        np.testing.assert_array_equal(t.data, frozen.params[name].data)


def test_train_rejects_dataset_from_other_grid(cli, tmp_path, dataset):
    code = cli(["train", "--grid", grid_file("ring10"), "--data", str(dataset),
                "--out", str(tmp_path / "x.ttnn"), "--epochs", "1", *TINY])
    assert code == 4


def test_eval_prints_metrics(cli, tmp_path, dataset, checkpoint, capsys):
    capsys.readouterr()
    out = tmp_path / "metrics.json"
    assert cli(["eval", "--checkpoint", str(checkpoint), "--data", str(dataset),
                "--grid", grid_file("two_node"), "--out", str(out)]) == 0
    assert "ACC=" in capsys.readouterr().out
    report = json.loads(out.read_text(encoding="utf-8"))
    for key in ("acc", "fpr", "fnr"):
        assert 0.0 <= report[key] <= 1.0
    assert report["tp"] + report["tn"] + report["fp"] + report["fn"] == 40


def test_eval_with_other_grid_exits_4(cli, dataset, checkpoint):
    assert cli(["eval", "--checkpoint", str(checkpoint), "--data", str(dataset),
                "--grid", grid_file("ring10")]) == 4


def test_predict_equilibrium_trajectory(cli, tmp_path, checkpoint, capsys):
    traj = tmp_path / "eq.csv"
    assert cli(["simulate", grid_file("two_node"), "--t-end", "0.125", "--out", str(traj), *SHORT]) == 0
    capsys.readouterr()
    assert cli(["predict", "--checkpoint", str(checkpoint), "--trajectory", str(traj),
                "--grid", grid_file("two_node")]) == 0
    lines = capsys.readouterr().out.splitlines()
    p = float(lines[0].split("=")[1])
    assert 0.0 < p < 1.0
    assert lines[1] == f"Verdict: {'stable' if p > 0.5 else 'unstable'}"


def test_predict_short_trajectory_exits_2(cli, tmp_path, checkpoint):
    traj = tmp_path / "short.csv"
    assert cli(["simulate", grid_file("two_node"), "--t-end", "0.05", "--out", str(traj), *SHORT]) == 0
    assert cli(["predict", "--checkpoint", str(checkpoint), "--trajectory", str(traj)]) == 2


def test_predict_rejects_other_sampling_interval(cli, tmp_path, checkpoint, capsys):
    traj = tmp_path / "coarse.csv"
    assert cli(["simulate", grid_file("two_node"), "--t-end", "0.5", "--dt", "0.025",
                "--out", str(traj), *SHORT]) == 0
    capsys.readouterr()
    assert cli(["predict", "--checkpoint", str(checkpoint), "--trajectory", str(traj)]) == 2
    assert "trained on 0.0125 s" in capsys.readouterr().out


def test_train_reuses_saved_split_index(cli, tmp_path, dataset, checkpoint):
    again = tmp_path / "again.ttnn"
    assert cli(["train", "--grid", grid_file("two_node"), "--data", str(dataset), "--out", str(again),
                "--splits", str(tmp_path / "pair.ttnn.splits.json"), "--seed", "8", "--epochs", "0", *TINY]) == 0
    first = json.loads((tmp_path / "pair.ttnn.splits.json").read_text(encoding="utf-8"))
    second = json.loads((tmp_path / "again.ttnn.splits.json").read_text(encoding="utf-8"))
    assert [second[name] for name in ("train", "val", "test")] == [first[name] for name in ("train", "val", "test")]


def test_eval_missing_checkpoint_exits_2(cli, tmp_path, dataset, capsys):
    assert cli(["eval", "--checkpoint", str(tmp_path / "nope.ttnn"), "--data", str(dataset)]) == 2
    assert "nope.ttnn" in capsys.readouterr().out


def test_train_missing_data_exits_2(cli, tmp_path):
    assert cli(["train", "--grid", grid_file("two_node"), "--data", str(tmp_path / "nope.ttds"),
                "--out", str(tmp_path / "x.ttnn"), *TINY]) == 2


def test_corrupt_dataset_sidecar_exits_2(cli, tmp_path, dataset, checkpoint, capsys):
    (tmp_path / "pair.ttds.json").write_text("{not json", encoding="utf-8")
    capsys.readouterr()
    assert cli(["eval", "--checkpoint", str(checkpoint), "--data", str(dataset)]) == 2
    assert "pair.ttds.json:1:2" in capsys.readouterr().out


def test_simulate_creates_missing_output_directory(cli, tmp_path):
    out = tmp_path / "nested" / "deeper" / "traj.csv"
    assert cli(["simulate", grid_file("two_node"), "--t-end", "0.125", "--out", str(out), *SHORT]) == 0
    assert len(out.read_text(encoding="utf-8").splitlines()) == 1 + 11


def test_generate_without_equilibrium_exits_3(cli, tmp_path, capsys):
    path = tmp_path / "overloaded.grid"
    path.write_text(json.dumps({
        "version": 1,
        "name": "overloaded",
        "nodes": [{"id": 0, "alpha": 0.5, "power": 2.0}, {"id": 1, "alpha": 0.5, "power": -2.0}],
        "edges": [{"from": 0, "to": 1, "k": 1.0}],
    }), encoding="utf-8")
    out = tmp_path / "never.ttds"
    assert cli(["generate", str(path), "--out", str(out), "--per-node", "1", "--window", "11", *SHORT]) == 3
    assert not out.exists()


def test_sweep_writes_one_row_per_window(cli, tmp_path, dataset):
    out = tmp_path / "sweep.csv"
    assert cli(["sweep", "--grid", grid_file("two_node"), "--data", str(dataset), "--windows", "5,11",
                "--latency-samples", "3", "--out", str(out), "--epochs", "1", *TINY]) == 0
    rows = out.read_text(encoding="utf-8").splitlines()
    assert rows[0] == "window,acc,fpr,fnr,auc,infer_ms"
    assert [r.split(",")[0] for r in rows[1:]] == ["5", "11"]


def test_replay_reproduces_outputs(cli, tmp_path, dataset, capsys):
    [manifest] = manifests(tmp_path, "generate")
    capsys.readouterr()
    assert cli(["replay", str(manifest)]) == 0
    assert "Replay reproduced every recorded output." in capsys.readouterr().out


def test_replay_detects_changed_outputs(cli, tmp_path, dataset):
    [manifest] = manifests(tmp_path, "generate")
    record = json.loads(manifest.read_text(encoding="utf-8"))
    record["outputs"]["dataset"]["sha256"] = "0" * 64
    manifest.write_text(json.dumps(record), encoding="utf-8")
    assert cli(["replay", str(manifest)]) == 4


def test_replay_without_manifests_exits_2(cli):
    assert cli(["replay"]) == 2
