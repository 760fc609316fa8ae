import csv
import json

import pytest

from oucal.cli import main


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def sim_dir(tmp_path):
    out = tmp_path / "sim"
    assert run("simulate", "--theta", 2, "--sigma-sq", 1, "--count", 10, "--steps", 120,
               "--seed", 42, "--out", out) == 0
    return out


def test_simulate_writes_paths_and_manifest(sim_dir):
    files = sorted(sim_dir.glob("traj_*.csv"))
    assert len(files) == 10
    meta = json.loads((sim_dir / "manifest.json").read_text())
    assert meta["master_seed"] == 42 and len(meta["files"]) == 10
    rows = read_csv(files[0])
    assert list(rows[0]) == ["t", "x"] and len(rows) == 121
    assert json.loads((sim_dir / "effective_config.json").read_text())["command"] == "simulate"


def test_simulate_rerun_is_byte_identical(sim_dir, tmp_path):
    again = tmp_path / "again"
    run("simulate", "--theta", 2, "--sigma-sq", 1, "--count", 10, "--steps", 120, "--seed", 42, "--out", again)
    for f in sorted(sim_dir.glob("traj_*.csv")) + [sim_dir / "manifest.json"]:
        assert f.read_bytes() == (again / f.name).read_bytes()


@pytest.mark.parametrize("argv", [
    ["--theta", "-1", "--sigma-sq", "1"],
    ["--theta", "1"],
    ["--regime", "all", "--count", "0"],
    ["--regime", "all", "--dt", "0"],
])
def test_simulate_bad_arguments_write_nothing(tmp_path, argv, capsys):
    out = tmp_path / "bad"
    assert run("simulate", *argv, "--out", out) == 2
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_simulate_regimes(tmp_path):
    out = tmp_path / "reg"
    assert run("simulate", "--regime", "all", "--count", 2, "--steps", 20, "--out", out) == 0
    meta = json.loads((out / "manifest.json").read_text())
    assert len(meta["files"]) == 8
    assert {(f["theta"], f["sigma_sq"]) for f in meta["files"]} == {(2.0, 1.0), (0.2, 1.0), (0.5, 4.0), (0.5, 0.25)}


def test_fit_on_simulated_dataset(sim_dir, tmp_path, capsys):
    out = tmp_path / "fit"
    assert run("fit", sim_dir, "--out", out, "--basin-hops", 3) == 0
    rows = read_csv(out / "fits.csv")
    assert len(rows) == 10
    assert all(r["error"] == "" and float(r["theta_hat"]) > 0 for r in rows)
    assert rows[0]["theta_true"] == "2.0"
    assert len(json.loads((out / "fits.json").read_text())) == 10
    assert "fitted 10/10" in capsys.readouterr().out


def test_fit_isolates_malformed_file(sim_dir, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("t,x\n0,1\nzero,2\n")
    good = sorted(sim_dir.glob("traj_*.csv"))[0]
    out = tmp_path / "fit"
    assert run("fit", good, bad, "--out", out, "--no-basinhop") == 0
    rows = read_csv(out / "fits.csv")
    assert rows[0]["error"] == "" and rows[0]["stage"] == "bfgs"
    assert rows[1]["error"] != ""


def test_fit_fails_when_every_path_fails(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("t,x\n0,1\n0.1,1\n0.2,1\n0.3,1\n")
    assert run("fit", bad, "--out", tmp_path / "o") == 1
    assert run("fit", tmp_path / "missing.csv", "--out", tmp_path / "o") == 1


def test_fit_inputs_unchanged(sim_dir, tmp_path):
    before = {f.name: f.read_bytes() for f in sim_dir.iterdir()}
    run("fit", sim_dir, "--out", tmp_path / "fit", "--no-basinhop")
    assert {f.name: f.read_bytes() for f in sim_dir.iterdir()} == before


def test_gmm_command(sim_dir, tmp_path):
    out = tmp_path / "gmm"
    assert run("gmm", sim_dir, "--out", out) == 0
    rows = read_csv(out / "gmm.csv")
    assert len(rows) == 10 and all(float(r["theta_hat"]) >= 0.5 for r in rows)


def test_train_then_infer(tmp_path, capsys):
    out = tmp_path / "model"
    assert run("train", "--epochs", 2, "--per-regime", 3, "--hidden", 3, "--steps", 30, "--out", out) == 0
    rows = read_csv(out / "loss_curve.csv")
    assert [r["epoch"] for r in rows] == ["1", "2"]
    data = tmp_path / "data"
    run("simulate", "--regime", "weak_mean_reversion", "--count", 4, "--steps", 30, "--out", data)
    est = tmp_path / "est"
    assert run("infer", data, "--model", out / "model.bin", "--out", est) == 0
    got = read_csv(est / "estimates.csv")
    assert len(got) == 4 and got[0]["theta_true"] == "0.2"


def test_train_from_dataset_directory(sim_dir, tmp_path):
    out = tmp_path / "m"
    assert run("train", "--data", sim_dir, "--epochs", 1, "--hidden", 2, "--out", out) == 0
    assert (out / "model.bin").exists()


def test_infer_model_errors(sim_dir, tmp_path):
    assert run("infer", sim_dir, "--out", tmp_path / "e") == 2
    assert run("infer", sim_dir, "--model", tmp_path / "nope.bin", "--out", tmp_path / "e") == 1


def test_infer_length_mismatch_exit_code(sim_dir, tmp_path):
    out = tmp_path / "model"
    run("train", "--epochs", 1, "--per-regime", 2, "--hidden", 2, "--steps", 30, "--out", out)
    assert run("infer", sim_dir, "--model", out / "model.bin", "--out", tmp_path / "e") == 1


def test_benchmark_smoke(tmp_path, capsys):
    out = tmp_path / "bench"
    code = run("benchmark", "--paths", 2, "--steps", 40, "--regime", "strong_mean_reversion",
               "--epochs", 1, "--per-regime", 2, "--hidden", 2, "--basin-hops", 2, "--out", out)
    assert code == 0
    for name in ("report.md", "report.csv", "report.json", "estimates.csv", "timing.json",
                 "model.bin", "loss_curve.csv", "effective_config.json"):
        assert (out / name).exists(), name
    assert "| MLE |" in capsys.readouterr().out
    assert len(read_csv(out / "estimates.csv")) == 4


def test_benchmark_without_rnn(tmp_path):
    out = tmp_path / "bench"
    assert run("benchmark", "--paths", 2, "--steps", 40, "--regime", "low_volatility", "--no-rnn",
               "--no-basinhop", "--out", out) == 0
    assert {r["estimator"] for r in read_csv(out / "estimates.csv")} == {"MLE"}
    assert not (out / "model.bin").exists()


def test_config_replay(tmp_path):
    first = tmp_path / "a"
    run("simulate", "--theta", 0.5, "--sigma-sq", 4, "--count", 3, "--steps", 25, "--seed", 9, "--out", first)
    cfg = first / "effective_config.json"
    second = tmp_path / "b"
    assert run("simulate", "--config", cfg, "--out", second) == 0
    for f in sorted(first.glob("traj_*.csv")):
        assert f.read_bytes() == (second / f.name).read_bytes()
    # explicit flags win over the file
    third = tmp_path / "c"
    run("simulate", "--config", cfg, "--count", 1, "--out", third)
    assert len(list(third.glob("traj_*.csv"))) == 1


def test_config_for_wrong_command(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"command": "fit", "args": {}}))
    with pytest.raises(SystemExit) as exc:
        run("simulate", "--config", cfg)
    assert exc.value.code == 2
