import json
import shutil

import numpy as np
import pytest

from latentctrl import synthworld as sw
from latentctrl.cli import main
from latentctrl.numeric import Rng


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    """A small synthesized and trained run directory, shared read-only."""
    d = tmp_path_factory.mktemp("run")
    assert main(["synth", "--out-dir", str(d), "--n", "5000", "--seed", "3"]) == 0
    assert main(["train", "--out-dir", str(d), "--seed", "3"]) == 0
    return d


@pytest.fixture
def run_dir(trained_run, tmp_path):
    d = tmp_path / "run"
    shutil.copytree(trained_run, d)
    return d


def test_synth_outputs(tmp_path, capsys):
    assert main(["synth", "--out-dir", str(tmp_path), "--n", "1000", "--seed", "1"]) == 0
    assert {"world.json", "bank.gclb", "bank.labels.jsonl"} <= {p.name for p in tmp_path.iterdir()}
    bank = sw.read_bank(tmp_path / "bank.gclb")
    assert bank.z.shape == (1000, 512)
    assert len((tmp_path / "bank.labels.jsonl").read_text().splitlines()) == 1000
    out = capsys.readouterr().out
    assert "smile" in out and "red=" in out


def test_synth_rejects_empty(tmp_path):
    assert main(["synth", "--out-dir", str(tmp_path), "--n", "0"]) == 2


def test_synth_byte_identical(tmp_path):
    for sub in ("a", "b"):
        assert main(["synth", "--out-dir", str(tmp_path / sub), "--n", "500", "--seed", "9"]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_usage_errors(tmp_path):
    assert main([]) == 2
    assert main(["bogus"]) == 2
    assert main(["synth", "--n", "ten"]) == 2
    assert main(["synth", "--out-dir", str(tmp_path), "--config", str(tmp_path / "nope.toml")]) == 2


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("seed = 4\n[synth]\nn = 300\ndim = 64\n")
    assert main(["synth", "--config", str(cfg), "--out-dir", str(tmp_path / "a")]) == 0
    assert sw.read_bank(tmp_path / "a" / "bank.gclb").z.shape == (300, 64)
    assert main(["synth", "--config", str(cfg), "--out-dir", str(tmp_path / "b"),
                 "--n", "200"]) == 0
    assert sw.read_bank(tmp_path / "b" / "bank.gclb").z.shape == (200, 64)
    assert json.loads((tmp_path / "a" / "world.json").read_text())["seed"] == 4


def test_train_outputs(trained_run):
    names = sorted(p.name for p in (trained_run / "classifiers").iterdir())
    assert names == ["age.gclf", "color.gclf", "eyeglasses.gclf", "gender.gclf", "smile.gclf"]
    report = json.loads((trained_run / "train_report.json").read_text())
    for a, r in report["attributes"].items():
        assert r["heldout_accuracy"] > 0.85, a


def test_train_one_per_class(tmp_path):
    assert main(["synth", "--out-dir", str(tmp_path), "--n", "300", "--dim", "64"]) == 0
    assert main(["train", "--out-dir", str(tmp_path), "--per-class", "1", "--epochs", "20"]) == 0


def test_train_corrupt_bank(tmp_path, capsys):
    assert main(["synth", "--out-dir", str(tmp_path), "--n", "100", "--dim", "64"]) == 0
    p = tmp_path / "bank.gclb"
    p.write_bytes(b"JUNK" + p.read_bytes()[4:])
    assert main(["train", "--out-dir", str(tmp_path)]) == 3
    assert "JUNK" in capsys.readouterr().err


def test_train_without_synth(tmp_path):
    assert main(["train", "--out-dir", str(tmp_path)]) == 3


def test_edit_example(run_dir):
    code = main(["edit", "--out-dir", str(run_dir), "--target", "smile", "--alpha", "0.6",
                 "--exclude", "age:100,glasses:100", "--index", "0"])
    assert code in (0, 4, 5)
    out = run_dir / "trajectories" / "edits"
    lines = (out / "traj_000000.jsonl").read_text().splitlines()
    last = json.loads(lines[-1])
    assert last["target"] == "smile" and last["stop_reason"] in (
        "boundary_crossed", "max_steps", "vanishing_gradient")
    first = json.loads(lines[0])
    assert first["step"] == 0 and len(first["z"]) == 512 and "eyeglasses" in first["logits"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["exclude"] == [["age", 100], ["eyeglasses", 100]]


def test_edit_flip_crosses(run_dir):
    assert main(["edit", "--out-dir", str(run_dir), "--target", "gender", "--index", "5"]) == 0


def test_edit_max_steps_exit(run_dir):
    bank = sw.read_bank(run_dir / "bank.gclb")
    world = sw.WorldSpec.load(run_dir / "world.json")
    far = int(np.argmax(np.abs(sw.oracle_scores(world, "gender", bank.z[:, :])[:, 0])))
    assert main(["edit", "--out-dir", str(run_dir), "--target", "gender", "--index", str(far),
                 "--max-steps", "1"]) == 5


def test_edit_usage_errors(run_dir):
    assert main(["edit", "--out-dir", str(run_dir), "--target", "hair"]) == 2
    assert main(["edit", "--out-dir", str(run_dir)]) == 2
    assert main(["edit", "--out-dir", str(run_dir), "--target", "gender",
                 "--exclude", "gender:5"]) == 2
    assert main(["edit", "--out-dir", str(run_dir), "--target", "color",
                 "--target-class", "purple"]) == 2
    assert main(["edit", "--out-dir", str(run_dir), "--target", "gender",
                 "--index", "99999999"]) == 2


def test_edit_multiclass_by_name_and_z_file(run_dir):
    world = sw.WorldSpec.load(run_dir / "world.json")
    z = sw.sample_latents(world, 2, Rng(1))
    zf = run_dir / "z.json"
    zf.write_text(json.dumps(z.tolist()))
    assert main(["edit", "--out-dir", str(run_dir), "--target", "color", "--target-class",
                 "blue", "--z-file", str(zf), "--name", "col", "--max-steps", "200"]) == 0
    files = sorted((run_dir / "trajectories" / "col").glob("*.jsonl"))
    assert len(files) == 2
    assert json.loads(files[0].read_text().splitlines()[-1])["target_class"] == 2


def test_edit_batch_is_deterministic(run_dir):
    for name in ("x", "y"):
        assert main(["edit", "--out-dir", str(run_dir), "--target", "age", "--boundary", "5",
                     "--exclude", "eyeglasses:100", "--name", name, "--workers", "2"]) == 0
    x = tree_bytes(run_dir / "trajectories" / "x")
    y = tree_bytes(run_dir / "trajectories" / "y")
    assert x == y and len(x) == 6


def test_eval_paired(run_dir, capsys):
    for name, extra in (("raw", []), ("masked", ["--exclude", "smile:100"])):
        assert main(["edit", "--out-dir", str(run_dir), "--target", "gender", "--boundary",
                     "20", "--name", name] + extra) == 0
    assert main(["eval", "--out-dir", str(run_dir), "--scatter", "gender,smile"]) == 0
    report = json.loads((run_dir / "metrics" / "metrics.json").read_text())
    assert set(report["groups"]) == {"raw", "masked"}
    for g in report["groups"].values():
        assert 0 <= g["accuracy"]["gender"] <= 1 and len(g["scatter"]) == 20
    raw_edges = report["groups"]["raw"]["ad_curves"]["gender"]["edges"]
    assert raw_edges == report["groups"]["masked"]["ad_curves"]["gender"]["edges"]
    assert (run_dir / "metrics" / "ad_masked_gender.csv").read_text().startswith("x_center")
    assert "masked" in capsys.readouterr().out


def test_eval_single_trajectory(run_dir):
    assert main(["edit", "--out-dir", str(run_dir), "--target", "smile", "--index", "2",
                 "--name", "one"]) in (0, 5)
    assert main(["eval", "--out-dir", str(run_dir), "--trajectories",
                 f"one={run_dir / 'trajectories' / 'one'}"]) == 0


def test_eval_empty_dir(run_dir, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["eval", "--out-dir", str(run_dir), "--trajectories", str(empty)]) == 3
    assert main(["eval", "--out-dir", str(run_dir)]) == 3  # no trajectories yet


def test_eval_mismatched_world(run_dir, tmp_path):
    assert main(["edit", "--out-dir", str(run_dir), "--target", "gender", "--index", "1",
                 "--name", "g"]) == 0
    other = tmp_path / "other"
    assert main(["synth", "--out-dir", str(other), "--n", "50", "--dim", "64"]) == 0
    assert main(["eval", "--out-dir", str(run_dir), "--world", str(other / "world.json")]) == 3


def test_sweep(run_dir, capsys):
    assert main(["sweep", "--out-dir", str(run_dir), "--target", "gender", "--confound",
                 "smile", "--counts", "0,100,250", "--boundary", "10"]) == 0
    summary = json.loads((run_dir / "sweep" / "gender.json").read_text())
    assert list(summary["drift"]) == ["0", "100", "250"]
    assert summary["drift"]["250"]["mean_drift"] <= summary["drift"]["0"]["mean_drift"]
    assert len(list((run_dir / "sweep" / "gender" / "c100").glob("*.jsonl"))) == 10
    assert main(["sweep", "--out-dir", str(run_dir), "--target", "gender", "--confound",
                 "smile", "--counts", "9999"]) == 2
