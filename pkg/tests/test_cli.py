import csv
import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

import mobprof
from mobprof import cli
from mobprof.config import RunConfig
from mobprof.errors import ConfigError
from mobprof.evaluation import REPORT_COLUMNS

FAST = {
    "episodes": 2,
    "transd.epochs": 20,
    "reward.baselines": {"d": 0.4, "c": 0.0, "p": 0.0},
}


@pytest.fixture
def smoke(tmp_path, monkeypatch):
    d = tmp_path / "smoke"
    shutil.copytree(Path(mobprof.smoke_config_path()).parent, d)
    monkeypatch.setenv(cli.CACHE_ENV, str(tmp_path / "cache"))
    return d / "config.yaml"


def load(path, **over):
    cfg = RunConfig.load(path)
    return cfg.with_overrides(over) if over else cfg


def test_config_validation(smoke, tmp_path):
    with pytest.raises(ConfigError):
        RunConfig({"nonsense": 1})
    with pytest.raises(ConfigError):
        RunConfig({"policy": "a3c"})
    with pytest.raises(ConfigError):
        RunConfig({"reward": {"weights": {"d": 0, "c": 0, "p": 0}}})
    with pytest.raises(ConfigError):
        RunConfig.load(smoke, ["agent.lr"])
    cfg = RunConfig.load(smoke, ["agent.lr=0.5", "update=up1"])
    assert cfg["agent"]["lr"] == 0.5 and cfg.agent_config().lr == 0.5 and cfg["update"] == "up1"
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "nope.yaml")


def test_fingerprint_location_independent(smoke, tmp_path):
    other = tmp_path / "elsewhere"
    shutil.copytree(smoke.parent, other)
    a, b = load(smoke), load(other / "config.yaml")
    assert a.fingerprint() == b.fingerprint() and a.build_fingerprint() == b.build_fingerprint()
    g = load(smoke, **{"grid.rows": 4})
    assert g.build_fingerprint() != a.build_fingerprint()
    assert load(smoke, episodes=3).build_fingerprint() == a.build_fingerprint()
    assert load(smoke, episodes=3).fingerprint() != a.fingerprint()


def test_build_cache(smoke, monkeypatch):
    cfg = load(smoke, **FAST)
    first = cli.cmd_build(cfg)
    assert not first.hit
    summary = json.loads((first.path / "build.json").read_text())
    assert summary["fingerprint"] == first.fingerprint and summary["n_events"] == 200

    def boom(*a, **k):
        raise AssertionError("recomputed")

    monkeypatch.setattr(cli, "build_artifacts", boom)
    again = cli.cmd_build(cfg)
    assert again.hit and again.path == first.path
    with pytest.raises(AssertionError):
        cli.cmd_build(cfg.with_overrides({"grid.cols": 4}))
    with np.load(first.path / "embeddings.npz") as z:
        assert str(z["meta_fingerprint"]) == first.fingerprint and str(z["meta_seed"]) == "0"


def test_missing_input_named(smoke):
    (smoke.parent / "taxi.csv").unlink()
    with pytest.raises(ConfigError, match="taxi.csv"):
        cli.cmd_build(load(smoke))
    assert cli.main(["build", str(smoke)]) == 2


def test_smoke_train_under_a_minute(smoke):
    cfg = load(smoke)
    t0 = time.time()
    trainer = cli.cmd_train(cfg)
    assert time.time() - t0 < 60
    out = cfg.output_dir()
    assert len(trainer.log) == cfg["episodes"]
    for name in ("agent.npz", "env.npz", "trainer.pkl", "episode_log.csv", "train.json", "baselines.json"):
        assert (out / name).is_file(), name
    lines = (out / "episode_log.csv").read_text().splitlines()
    assert lines[0] == f"# fingerprint={cfg.fingerprint()} seed=0"
    assert len(lines) == 2 + cfg["episodes"]
    for name in ("agent.npz", "env.npz"):
        with np.load(out / name) as z:
            assert str(z["meta_fingerprint"]) == cfg.fingerprint()


def test_seed_determinism(smoke, tmp_path):
    runs = []
    for name in ("a", "b"):
        cfg = load(smoke, output_dir=str(tmp_path / name), **FAST)
        cli.cmd_train(cfg)
        runs.append(cfg.output_dir())
    for f in ("agent.npz", "env.npz", "episode_log.csv", "train.json"):
        assert (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes(), f
    other = load(smoke, output_dir=str(tmp_path / "c"), seed=1, **FAST)
    cli.cmd_train(other)
    assert (runs[0] / "agent.npz").read_bytes() != (other.output_dir() / "agent.npz").read_bytes()


def test_resume_bit_exact(smoke, tmp_path):
    over = dict(FAST, episodes=4)
    full = load(smoke, output_dir=str(tmp_path / "full"), **over)
    cli.cmd_train(full)
    part = load(smoke, output_dir=str(tmp_path / "part"), **over)
    cli.cmd_train(part, stop_after=2)
    assert json.loads((part.output_dir() / "train.json").read_text())["episodes_done"] == 2
    cli.cmd_train(part, resume=True)
    for f in ("agent.npz", "env.npz", "episode_log.csv"):
        assert (full.output_dir() / f).read_bytes() == (part.output_dir() / f).read_bytes(), f
    with pytest.raises(ConfigError):
        cli.cmd_train(load(smoke, output_dir=str(tmp_path / "part"), **dict(over, seed=3)), resume=True)
    with pytest.raises(ConfigError):
        cli.cmd_train(load(smoke, output_dir=str(tmp_path / "empty"), **over), resume=True)


def test_eval(smoke, tmp_path):
    cfg = load(smoke, **FAST)
    with pytest.raises(ConfigError, match="agent.npz"):
        cli.cmd_eval(cfg)
    rep = cli.cmd_eval(cfg, oracle=True)
    assert (rep.prec_cat, rep.rec_cat, rep.avg_sim, rep.avg_dist_km) == (1.0, 1.0, 1.0, 0.0)
    cli.cmd_train(cfg)
    rep = cli.cmd_eval(cfg)
    out = cfg.output_dir()
    with open(out / "report.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == REPORT_COLUMNS and len(rows) == 2
    assert float(rows[1][0]) == rep.prec_cat
    full = json.loads((out / "report.json").read_text())
    assert full["fingerprint"] == cfg.fingerprint() and full["seed"] == 0
    assert 0.0 <= rep.prec_cat <= 1.0 and rep.avg_dist_km >= 0.0
    assert cli.main(["eval", str(smoke), "--set", "episodes=2", "--set", "transd.epochs=20",
                     "--set", "reward.baselines={d: 0.4, c: 0.0, p: 0.0}"]) == 0


def test_sweep(smoke, tmp_path):
    cfg = load(smoke, **dict(FAST, episodes=1))
    with pytest.raises(ConfigError):
        cli.cmd_sweep(cfg, {})
    axes = dict([cli.parse_axis("lambda_d=[0.01, 1]"), cli.parse_axis("lambda_c=[0.5, 1]")])
    rows = cli.cmd_sweep(cfg, axes)
    assert len(rows) == 4 * len(cli.METRICS)
    for m in cli.METRICS:
        assert len([r for r in rows if r["metric"] == m]) == 4
    with open(cfg.output_dir() / "sweep.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == len(rows)
    # each row matches a standalone train + eval of that point
    point = {"reward.weights.d": 1, "reward.weights.c": 0.5}
    solo = cfg.with_overrides(dict(point, output_dir=str(tmp_path / "solo")))
    cli.cmd_train(solo)
    rep = cli.cmd_eval(solo)
    for m in cli.METRICS:
        (row,) = [r for r in rows if r["metric"] == m and r["reward.weights.d"] == 1 and r["reward.weights.c"] == 0.5]
        assert row["value"] == getattr(rep, m)
    with pytest.raises(ConfigError):
        cli.parse_axis("policy=[]")


def test_cli_main_roundtrip(smoke, tmp_path, capsys):
    sets = ["--set", "episodes=1", "--set", "transd.epochs=20", "--set", f"output_dir={tmp_path / 'm'}"]
    assert cli.main(["build", str(smoke), *sets]) == 0
    assert "built" in capsys.readouterr().out
    assert cli.main(["build", str(smoke), *sets]) == 0
    assert "cache hit" in capsys.readouterr().out
    assert cli.main(["calibrate", str(smoke), *sets, "--set", "reward.calibration_rounds=4"]) == 0
    assert cli.main(["train", str(smoke), *sets, "--set", "reward.calibration_rounds=4"]) == 0
    assert cli.main(["eval", str(smoke), *sets, "--set", "reward.calibration_rounds=4"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-2] == ",".join(REPORT_COLUMNS)
    assert cli.main(["sweep", str(smoke), *sets]) == 2
    assert cli.main(["train", str(smoke), "--set", "policy=a3c"]) == 2
