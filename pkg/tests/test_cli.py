import csv
import filecmp
import json
import math

import numpy as np
import pytest
from click.testing import CliRunner

from opendyn.cli import main
from opendyn.solvers import read_trajectory_csv


def run(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


def write_config(path, **kw):
    path.write_text(json.dumps({"format_version": 1, **kw}))
    return path


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    files = [f for f in cmp.common_files]
    match, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
    return not mismatch and not errors and not cmp.left_only and not cmp.right_only and all(
        same_tree(a / d, b / d) for d in cmp.common_dirs
    )


@pytest.fixture(scope="module")
def sme_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("sme")
    cfg = write_config(root / "cfg.json", t_final=1.0)
    r = run("gen-sme-data", "--config", cfg, "--out-dir", root / "data", "--trajectories", 4, "--seed", 3)
    assert r.exit_code == 0, r.output
    return root


@pytest.fixture(scope="module")
def spin_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("spin")
    cfg = write_config(root / "cfg.json", n_bath=2, t_final=2.0, dt=0.01)
    r = run("gen-spinstar-data", "--config", cfg, "--out-dir", root / "data", "--trajectories", 3, "--samples", 4, "--seed", 1)
    assert r.exit_code == 0, r.output
    return root


def test_help_documents_every_flag():
    r = run("--help")
    assert r.exit_code == 0
    commands = ["gen-sme-data", "train-sme", "reconstruct", "gen-spinstar-data", "train-nz", "sweep-kernel"]
    for cmd in commands:
        assert cmd in r.output
        ctx_cmd = main.get_command(None, cmd)
        text = run(cmd, "--help").output
        for p in ctx_cmd.params:
            for opt in p.opts:
                assert opt in text


def test_unknown_flag_is_an_error(tmp_path):
    r = run("gen-sme-data", "--out-dir", tmp_path, "--trajectories", 1, "--bogus")
    assert r.exit_code == 2 and "bogus" in r.output


def test_gen_sme_data_layout_and_summary(sme_dir):
    data = sme_dir / "data"
    assert sorted(p.name for p in (data / "records").iterdir()) == [f"record_{i:04d}.csv" for i in range(4)]
    meta = json.loads((data / "metadata.json").read_text())
    assert meta["format_version"] == 1 and len(meta["config_hash"]) > 0
    assert meta["config"]["t_final"] == 1.0


def test_gen_sme_data_is_byte_identical(tmp_path, sme_dir):
    cfg = write_config(tmp_path / "cfg.json", t_final=1.0)
    for threads in (1, 2):
        r = run("gen-sme-data", "--config", cfg, "--out-dir", tmp_path / f"d{threads}", "--trajectories", 4, "--seed", 3, "--threads", threads)
        assert r.exit_code == 0
    assert same_tree(tmp_path / "d1", tmp_path / "d2")
    assert same_tree(tmp_path / "d1", sme_dir / "data")


def test_zero_trajectories_is_config_error(tmp_path):
    r = run("gen-sme-data", "--out-dir", tmp_path / "x", "--trajectories", 0)
    assert r.exit_code == 2


def test_config_unknown_key_and_version(tmp_path):
    bad = write_config(tmp_path / "a.json", t_final=1.0, colour="red")
    r = run("gen-sme-data", "--config", bad, "--out-dir", tmp_path / "x", "--trajectories", 1)
    assert r.exit_code == 2 and "colour" in r.output
    (tmp_path / "b.json").write_text(json.dumps({"format_version": 7}))
    r = run("gen-sme-data", "--config", tmp_path / "b.json", "--out-dir", tmp_path / "x", "--trajectories", 1)
    assert r.exit_code == 2
    r = run("gen-sme-data", "--config", tmp_path / "missing.json", "--out-dir", tmp_path / "x", "--trajectories", 1)
    assert r.exit_code == 3


def test_train_sme_outputs_and_determinism(tmp_path, sme_dir):
    cfg = write_config(tmp_path / "t.json", max_steps=5)
    outs = []
    for k in range(2):
        out = tmp_path / f"fit{k}.json"
        r = run("train-sme", "--config", cfg, "--data-dir", sme_dir / "data", "--out", out, "--swarm", 2, "--seed", 1)
        assert r.exit_code == 0, r.output
        outs.append(out)
    assert filecmp.cmp(*outs, shallow=False)
    assert filecmp.cmp(str(outs[0]) + ".log.jsonl", str(outs[1]) + ".log.jsonl", shallow=False)
    doc = json.loads(outs[0].read_text())
    assert set(doc["params"]) == {"omega", "gamma", "eta"}
    assert doc["format_version"] == 1 and doc["config_hash"]
    assert len(doc["swarm"]["runs"]) == 2


def test_train_sme_divergence_exits_4_with_partial_result(tmp_path, sme_dir):
    cfg = write_config(tmp_path / "t.json", max_steps=20, lr=1e3, clip=1e30)
    out = tmp_path / "fit.json"
    r = run("train-sme", "--config", cfg, "--data-dir", sme_dir / "data", "--out", out, "--swarm", 2)
    assert r.exit_code == 4
    doc = json.loads(out.read_text())
    assert doc["diverged"] and doc["config_hash"]


def test_train_sme_missing_data_dir(tmp_path):
    r = run("train-sme", "--data-dir", tmp_path / "nope", "--out", tmp_path / "o.json")
    assert r.exit_code == 3


def test_reconstruct_with_truth_matches_withheld_trajectory(tmp_path, sme_dir):
    params = tmp_path / "truth.json"
    params.write_text(json.dumps({"params": {"omega": 1.0, "gamma": 0.5, "eta": 0.4}}))
    out = tmp_path / "traj.csv"
    r = run("reconstruct", "--params", params, "--record", sme_dir / "data" / "records" / "record_0002.csv", "--out", out)
    assert r.exit_code == 0, r.output
    t, states = read_trajectory_csv(out)
    t_ref, ref = read_trajectory_csv(sme_dir / "data" / "truth" / "trajectory_0002.csv")
    np.testing.assert_allclose(t, t_ref, atol=1e-12)
    rmse = math.sqrt(np.mean((states[:, 0, 0].real - ref[:, 0, 0].real) ** 2))
    assert rmse <= 1e-6
    side = json.loads((tmp_path / "traj.csv.json").read_text())
    assert side["format_version"] == 1


def test_reconstruct_missing_record_names_path(tmp_path):
    params = tmp_path / "p.json"
    params.write_text(json.dumps({"params": {"omega": 1.0, "gamma": 0.5, "eta": 0.4}}))
    missing = tmp_path / "nowhere.csv"
    r = run("reconstruct", "--params", params, "--record", missing, "--out", tmp_path / "o.csv")
    assert r.exit_code == 3 and str(missing) in r.output


def test_gen_spinstar_data_is_byte_identical(tmp_path, spin_dir):
    cfg = write_config(tmp_path / "cfg.json", n_bath=2, t_final=2.0, dt=0.01)
    r = run("gen-spinstar-data", "--config", cfg, "--out-dir", tmp_path / "d", "--trajectories", 3, "--samples", 4, "--seed", 1, "--threads", 1)
    assert r.exit_code == 0
    assert same_tree(tmp_path / "d", spin_dir / "data")
    with open(tmp_path / "d" / "populations.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + 12


def test_train_nz_outputs_and_bad_channels(tmp_path, spin_dir):
    cfg = write_config(tmp_path / "t.json", max_steps=3)
    outs = []
    for k in range(2):
        out = tmp_path / f"nz{k}.json"
        r = run("train-nz", "--config", cfg, "--data-dir", spin_dir / "data", "--kernel-length", 3, "--swarm", 2, "--out", out)
        assert r.exit_code == 0, r.output
        outs.append(out)
    assert filecmp.cmp(*outs, shallow=False)
    doc = json.loads(outs[0].read_text())
    assert doc["nz"]["best_rmse"] >= 0 and doc["lindblad"]["best_rmse"] >= 0
    r = run("train-nz", "--data-dir", spin_dir / "data", "--channels", "sq", "--out", tmp_path / "x.json")
    assert r.exit_code == 2


def test_delta_init_length_one_reproduces_lindblad_rmse(tmp_path, spin_dir):
    cfg = write_config(tmp_path / "t.json", max_steps=40, init="delta")
    out = tmp_path / "nz.json"
    r = run("train-nz", "--config", cfg, "--data-dir", spin_dir / "data", "--channels", "sm", "--kernel-length", 1, "--swarm", 2, "--out", out)
    assert r.exit_code == 0, r.output
    doc = json.loads(out.read_text())
    assert abs(doc["nz_initial_rmse"] - doc["lindblad"]["best_rmse"]) <= 1e-6


def test_sweep_kernel_csv_and_sidecar(tmp_path, spin_dir):
    cfg = write_config(tmp_path / "s.json", max_steps=2)
    out = tmp_path / "sweep.csv"
    r = run("sweep-kernel", "--config", cfg, "--data-dir", spin_dir / "data", "--lengths", "1,2", "--channel-sets", "sm", "--swarm", 2, "--out", out)
    assert r.exit_code == 0, r.output
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["L"]) for r in rows] == [1, 1, 2, 2]
    side = json.loads((tmp_path / "sweep.csv.json").read_text())
    assert side["config_hash"] and "lindblad_best_rmse" in side and len(side["summary"]) == 2
    r = run("sweep-kernel", "--data-dir", spin_dir / "data", "--lengths", "0,2", "--out", out)
    assert r.exit_code == 2
