import json
import hashlib

import numpy as np
import pytest

from voltmarl import building as bd
from voltmarl.cli import main
from voltmarl.config import load_run_config
from voltmarl.environment import GridEnv
from voltmarl.ppo import train

SMALL = {"preset": "desk-scale", "seed": 3, "scenario": {"episode_days": 1},
         "ppo": {"total_steps": 512, "steps_per_update": 256}}


def write_config(path, doc=SMALL):
    path.write_text(json.dumps(doc))
    return path


def updates(curve):
    rows = curve.read_text().strip().splitlines()[1:]
    return sorted({int(r.split(",")[0]) for r in rows})


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "cfg.json")
    assert main(["train", "--config", str(cfg), "--out", str(root / "train"), "--quiet"]) == 0
    return root, cfg


@pytest.fixture(scope="module")
def baseline(tmp_path_factory):
    root = tmp_path_factory.mktemp("base")
    cfg = write_config(root / "cfg.json")
    assert main(["baseline", "--config", str(cfg), "--out", str(root / "b1")]) == 0
    return root, cfg


# -- validate-config ------------------------------------------------------------

def test_validate_config_ok(tmp_path, capsys):
    assert main(["validate-config", "--config", str(write_config(tmp_path / "c.json"))]) == 0
    assert "desk-scale" in capsys.readouterr().out


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["validate-config", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_schema_violation_exit_2(tmp_path):
    bad = dict(SMALL, ppo={"gamma": 1.5})
    assert main(["validate-config", "--config", str(write_config(tmp_path / "c.json", bad))]) == 2
    bad = dict(SMALL, bogus=1)
    assert main(["validate-config", "--config", str(write_config(tmp_path / "d.json", bad))]) == 2


# -- train / evaluate -------------------------------------------------------------

def test_train_writes_checkpoints_and_curve(trained):
    root, _ = trained
    out = root / "train"
    assert updates(out / "training_curve.csv") == [1, 2]
    ck = sorted(p.name for p in (out / "checkpoints").glob("agent_*.npz"))
    env = GridEnv(load_run_config(root / "cfg.json").scenario)
    env.reset()
    assert len(ck) == len(env.agents)
    assert (out / "config.json").is_file()


def test_resume_matches_uninterrupted(trained, tmp_path):
    root, cfg = trained
    rc = load_run_config(cfg)
    env = GridEnv(rc.scenario)
    env.reset()
    part = tmp_path / "part"
    train(env, rc.ppo, rc.seed, part, config_hash=rc.hash, stop_after_updates=1)
    assert updates(part / "training_curve.csv") == [1]
    assert main(["train", "--config", str(cfg), "--out", str(part), "--resume", "--quiet"]) == 0
    assert (part / "training_curve.csv").read_bytes() == (root / "train" / "training_curve.csv").read_bytes()
    for f in (root / "train" / "checkpoints").glob("agent_*.npz"):
        a, b = np.load(f), np.load(part / "checkpoints" / f.name)
        for k in a.files:
            np.testing.assert_array_equal(a[k], b[k])


def test_resume_with_other_config_exit_4(trained, tmp_path):
    root, _ = trained
    part = tmp_path / "p"
    rc = load_run_config(root / "cfg.json")
    env = GridEnv(rc.scenario)
    env.reset()
    train(env, rc.ppo, rc.seed, part, config_hash=rc.hash, stop_after_updates=1)
    other = write_config(tmp_path / "o.json", dict(SMALL, seed=4))
    assert main(["train", "--config", str(other), "--out", str(part), "--resume", "--quiet"]) == 4


def test_evaluate_writes_report(trained):
    root, _ = trained
    out = root / "eval"
    assert main(["evaluate", "--checkpoints", str(root / "train"), "--out", str(out)]) == 0
    v = np.loadtxt(out / "voltages.csv", delimiter=",", skiprows=1)
    assert v.shape == (96 * 33, 3)
    assert set(json.loads((out / "violations.json").read_text())) == {"v>1.04", "v>1.03", "v<0.97", "v<0.96"}


def test_evaluate_on_other_profiles(trained, tmp_path):
    root, _ = trained
    csv_path = tmp_path / "res.csv"
    bd.write_profiles_csv(bd.synthesize_profiles(11, 1, 0.25, "residential"), csv_path)
    doc = json.loads(json.dumps(SMALL))
    doc["scenario"]["profile_csv"] = {"residential": str(csv_path)}
    cfg = write_config(tmp_path / "t.json", doc)
    out = tmp_path / "ev"
    assert main(["evaluate", "--checkpoints", str(root / "train"), "--config", str(cfg), "--out", str(out)]) == 0
    other = root / "eval_default"
    main(["evaluate", "--checkpoints", str(root / "train"), "--out", str(other)])
    assert sha(out / "voltages.csv") != sha(other / "voltages.csv")


def test_evaluate_missing_agent_exit_4(trained, tmp_path):
    root, _ = trained
    import shutil
    run = tmp_path / "copy"
    shutil.copytree(root / "train", run)
    next(iter(sorted((run / "checkpoints").glob("agent_*.npz")))).unlink()
    assert main(["evaluate", "--checkpoints", str(run), "--out", str(tmp_path / "e")]) == 4
    assert main(["evaluate", "--checkpoints", str(tmp_path / "none"), "--out", str(tmp_path / "e")]) == 4


def test_bad_profile_file_exit_2(trained, tmp_path):
    root, _ = trained
    doc = json.loads(json.dumps(SMALL))
    doc["scenario"]["profile_csv"] = {"residential": str(tmp_path / "absent.csv")}
    cfg = write_config(tmp_path / "t.json", doc)
    assert main(["baseline", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 2


# -- baseline -------------------------------------------------------------------

def test_baseline_outputs(baseline):
    root, _ = baseline
    out = root / "b1"
    v = np.loadtxt(out / "voltages.csv", delimiter=",", skiprows=1)
    assert v.shape == (96 * 33, 3)
    np.testing.assert_array_equal(v[:33, 1], np.arange(33))
    for name in ("agents.csv", "episode.json", "series.csv", "histogram.csv", "manifest.json"):
        assert (out / name).is_file()


def test_baseline_reproducible(baseline):
    root, cfg = baseline
    assert main(["baseline", "--config", str(cfg), "--out", str(root / "b2")]) == 0
    for name in ("voltages.csv", "agents.csv", "series.csv", "histogram.csv"):
        assert sha(root / "b1" / name) == sha(root / "b2" / name)


def test_baseline_high_pv_overvoltage(tmp_path):
    # full week of the desk preset, whose synthesized profiles are PV heavy
    assert main(["baseline", "--preset", "desk-scale", "--out", str(tmp_path / "w")]) == 0
    counts = json.loads((tmp_path / "w" / "violations.json").read_text())
    assert counts["v>1.03"] > counts["v<0.97"]


def test_seed_override_changes_output(baseline, tmp_path):
    root, cfg = baseline
    assert main(["baseline", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / "s")]) == 0
    assert sha(tmp_path / "s" / "voltages.csv") != sha(root / "b1" / "voltages.csv")


def test_manifest_complete(baseline):
    out = baseline[0] / "b1"
    man = json.loads((out / "manifest.json").read_text())
    listed = {f["path"]: f for f in man["files"]}
    on_disk = {p.name for p in out.iterdir() if p.name != "manifest.json"}
    assert set(listed) == on_disk
    for name, entry in listed.items():
        assert entry["sha256"] == sha(out / name)
        assert entry["bytes"] == (out / name).stat().st_size
    assert man["command"] == "baseline" and man["seed"] == 3 and man["config_hash"]


# -- compare --------------------------------------------------------------------

def test_compare_identical_and_swapped(baseline, trained, tmp_path, capsys):
    b = baseline[0] / "b1"
    assert main(["compare", str(b), str(b), "--out", str(tmp_path / "same")]) == 0
    same = json.loads((tmp_path / "same" / "comparison.json").read_text())
    assert all(d == 0 for d in same["violation_deltas"].values())
    e = trained[0] / "eval"
    if not e.is_dir():
        main(["evaluate", "--checkpoints", str(trained[0] / "train"), "--out", str(e)])
    main(["compare", str(e), str(b), "--out", str(tmp_path / "ab")])
    main(["compare", str(b), str(e), "--out", str(tmp_path / "ba")])
    ab = json.loads((tmp_path / "ab" / "comparison.json").read_text())
    ba = json.loads((tmp_path / "ba" / "comparison.json").read_text())
    for k in ab["violation_deltas"]:
        assert ab["violation_deltas"][k] == -ba["violation_deltas"][k]
    assert "Baseline" in capsys.readouterr().out


def test_compare_missing_run_exit_5(baseline, tmp_path):
    assert main(["compare", str(baseline[0] / "b1"), str(tmp_path / "gone"), "--out", str(tmp_path / "c")]) == 5


def test_threads_flag(tmp_path):
    assert main(["--threads", "1", "validate-config", "--config", str(write_config(tmp_path / "c.json"))]) == 0
