"""Command line entry point: build, calibrate, train, eval and sweep.

Every command reads one YAML run config; ``--set key=value`` overrides single
fields. Build artifacts are cached under ``$MOBPROF_CACHE`` (default
``<output_dir>/cache``) in a directory named after the build fingerprint.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import pickle
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import environment as envmod
from .agent import Agent, EpisodeLog, RewardConfig, Trainer, load_agent, save_agent, state_vector
from .config import RunConfig, parse_override
from .errors import ConfigError, DataError, MobprofError
from .evaluation import REPORT_COLUMNS, EvalReport, evaluate
from .ingest import ParseReport, parse_checkins, parse_taxi, save_contexts
from .pipeline import Artifacts, build_artifacts, event_stream, make_env
from .profile_init import save_user_table
from .reward import CategoryVectors, RewardBaselines, calibrate_baselines, load_word_vectors
from .spatial_kg import save_embeddings

LOG = logging.getLogger("mobprof")

CACHE_ENV = "MOBPROF_CACHE"
METRICS = ("prec_cat", "rec_cat", "avg_sim", "avg_dist_km")

# short names accepted by ``sweep --axis``
AXIS_ALIASES = {
    "lambda_d": "reward.weights.d",
    "lambda_c": "reward.weights.c",
    "lambda_p": "reward.weights.p",
    "reward": "reward.variant",
    "policy": "policy",
    "update": "update",
    "priority": "priority",
}


@dataclass
class BuildResult:
    artifacts: Artifacts
    path: Path
    hit: bool
    fingerprint: str


def cache_root(cfg: RunConfig) -> Path:
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else cfg.output_dir() / "cache"


def cmd_build(cfg: RunConfig) -> BuildResult:
    """Parse inputs and build the KG, embeddings and initial states, or reuse the cache."""
    cfg.check_files()
    fp = cfg.build_fingerprint()
    seed = cfg["seed"]
    path = cache_root(cfg) / fp
    blob = path / "artifacts.pkl"
    if blob.is_file() and (path / "build.json").is_file():
        LOG.info("build cache hit fingerprint=%s path=%s", fp, path)
        with open(blob, "rb") as fh:
            return BuildResult(pickle.load(fh), path, True, fp)

    d = cfg["data"]
    reports = {k: ParseReport(str(cfg.path(k))) for k in ("checkins", "taxi")}
    events = parse_checkins(
        cfg.path("checkins"), d["checkin_columns"] or None, d["delimiter"], d["header"], reports["checkins"]
    )
    trips = parse_taxi(cfg.path("taxi"), d["taxi_columns"] or None, d["delimiter"], d["header"], reports["taxi"])
    for r in reports.values():
        r.log()
    t = cfg["transd"]
    art = build_artifacts(
        events,
        trips,
        cfg.grid(),
        window_len=float(cfg["window_len"]),
        dim=int(cfg["dim"]),
        train_frac=float(cfg["train_frac"]),
        profile_fraction=float(cfg["profile_fraction"]),
        init_method=cfg["init_method"],
        transd_epochs=int(t["epochs"]),
        transd_lr=float(t["lr"]),
        transd_margin=float(t["margin"]),
        seed=int(seed),
    )
    path.mkdir(parents=True, exist_ok=True)
    with open(blob, "wb") as fh:
        pickle.dump(art, fh, protocol=4)
    save_embeddings(path / "embeddings.npz", art.embeddings, fingerprint=fp, seed=seed)
    save_user_table(path / "users.npz", art.users, fingerprint=fp, seed=seed)
    save_contexts(path / "contexts.npz", art.contexts, fingerprint=fp, seed=seed)
    summary = {
        "fingerprint": fp,
        "seed": seed,
        "n_events": len(art.train) + len(art.test),
        "n_train": len(art.train),
        "n_test": len(art.test),
        "n_pois": art.kg.n_pois,
        "n_categories": art.kg.n_categories,
        "n_zones": art.kg.n_zones,
        "outside_pois": art.kg.outside_pois,
        "n_windows": len(art.contexts),
        "skipped_rows": {k: dict(r.reasons) for k, r in reports.items()},
        "transd_final_loss": float(art.embeddings.loss_history[-1]) if art.embeddings.loss_history else None,
    }
    (path / "build.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    LOG.info("build done fingerprint=%s pois=%d users=%d", fp, art.kg.n_pois, len(art.users.user_ids))
    return BuildResult(art, path, False, fp)


def category_vectors(cfg: RunConfig, art: Artifacts) -> CategoryVectors:
    names = art.kg.category_names
    vocab = {tok for n in names.values() for tok in n.lower().split()}
    words, dim = load_word_vectors(cfg.path("word_vectors"), vocab)
    return CategoryVectors.from_word_vectors(names, words, dim)


def _setup(cfg: RunConfig):
    built = cmd_build(cfg)
    art = built.artifacts
    grid = cfg.grid()
    g = cfg["gates"]
    env = make_env(art, grid, int(cfg["seed"]), float(g["scale"]), float(g["user_bias"]), float(g["kg_bias"]))
    train = event_stream(art.train, art.contexts, grid.m)
    test = event_stream(art.test, art.contexts, grid.m)
    return built, env, train, test, category_vectors(cfg, art)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_calibrate(cfg: RunConfig) -> RewardBaselines:
    """Reward baselines: fixed ones from the config, else calibrated under a uniform random policy."""
    fixed = cfg.fixed_baselines()
    if fixed is not None:
        return fixed
    fp = cfg.fingerprint(("data", "grid", "window_len", "dim", "train_frac", "profile_fraction",
                          "init_method", "transd", "gates", "reward", "update", "seed"))
    out = cfg.output_dir() / "baselines.json"
    if out.is_file():
        saved = json.loads(out.read_text())
        if saved.get("fingerprint") == fp:
            return RewardBaselines(**saved["baselines"])
    built, env, train, _, vectors = _setup(cfg)
    rng = np.random.default_rng([int(cfg["seed"]), 5])
    n = built.artifacts.kg.n_pois
    report = calibrate_baselines(
        env, train, lambda _env, _ev: int(rng.integers(n)), built.artifacts.kg, vectors,
        int(cfg["reward"]["calibration_rounds"]), cfg["update"],
    )
    _write_json(out, {
        "fingerprint": fp,
        "seed": cfg["seed"],
        "baselines": asdict(report.baselines),
        "n_samples": report.samples,
        "rounds": report.rounds,
        "component_min": [float(v) for v in report.minimum],
        "component_max": [float(v) for v in report.maximum],
    })
    return report.baselines


def _write_episode_log(path: Path, log: Sequence[EpisodeLog], fp: str, seed) -> None:
    with open(path, "w") as fh:
        fh.write(f"# fingerprint={fp} seed={seed}\n")
        fh.write(",".join(EpisodeLog.COLUMNS) + "\n")
        for row in log:
            fh.write(row.row() + "\n")


def cmd_train(cfg: RunConfig, resume: bool = False, stop_after: Optional[int] = None) -> Trainer:
    """Train (or resume) and write trainer.pkl, agent.npz, env.npz and episode_log.csv."""
    out = cfg.output_dir()
    fp, seed = cfg.fingerprint(), cfg["seed"]
    state_file = out / "trainer.pkl"
    trainer = None
    if resume:
        meta = out / "train.json"
        if not state_file.is_file() or not meta.is_file():
            raise ConfigError(f"nothing to resume in {out}")
        if json.loads(meta.read_text()).get("fingerprint") != fp:
            raise ConfigError("checkpoint was written under a different config")
        trainer = Trainer.load(state_file)
    if trainer is None:
        baselines = cmd_calibrate(cfg)
        _, env, train, _, vectors = _setup(cfg)
        if not train:
            raise DataError("empty training stream")
        x = state_vector(env, train[0][0].user_id)
        agent = Agent(len(x), env.kg.n_pois, cfg.agent_config())
        rc = RewardConfig(cfg["reward"]["variant"], cfg.weights(), baselines)
        trainer = Trainer(env, agent, train, vectors, rc, int(cfg["episodes"]), cfg["update"])
    start = trainer.episode
    trainer.run(until=stop_after)
    for row in trainer.log[start:]:
        LOG.info("episode=%d reward=%.6g accuracy=%.4f avg_dist_km=%.4f loss=%.6g epsilon=%.4f",
                 row.episode, row.reward, row.accuracy, row.avg_dist_km, row.loss, row.epsilon)
    out.mkdir(parents=True, exist_ok=True)
    trainer.save(state_file)
    save_agent(out / "agent.npz", trainer.agent, fingerprint=fp, seed=seed)
    envmod.save_env(out / "env.npz", trainer.env, fingerprint=fp, seed=seed)
    _write_episode_log(out / "episode_log.csv", trainer.log, fp, seed)
    _write_json(out / "train.json", {
        "fingerprint": fp,
        "seed": seed,
        "episodes_done": trainer.episode,
        "episodes": trainer.episodes,
        "baselines": asdict(trainer.reward_cfg.baselines),
    })
    return trainer


def write_report(report: EvalReport, out: Path, seed) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        w.writerow([getattr(report, c) for c in REPORT_COLUMNS])
    _write_json(out / "report.json", {**report.as_dict(), "seed": seed})


def cmd_eval(cfg: RunConfig, checkpoint: Optional[Path] = None, oracle: bool = False) -> EvalReport:
    """Greedy evaluation on the test shard, written to report.csv and report.json."""
    ckpt = Path(checkpoint) if checkpoint else cfg.output_dir()
    fp, seed = cfg.fingerprint(), cfg["seed"]
    built, env, train, test, vectors = _setup(cfg)
    kg = built.artifacts.kg
    if oracle:
        # a perfect predictor; the state is advanced through the training shard first
        for event, T_flat in train:
            envmod.apply_event(env, event.user_id, event.poi_id, T_flat, cfg["update"])

        def predict(_env, event):
            return kg.poi(event.poi_id)
    else:
        files = [ckpt / "agent.npz", ckpt / "env.npz"]
        for f in files:
            if not f.is_file():
                raise ConfigError(f"checkpoint file not found: {f}")
        agent = load_agent(files[0])
        env = envmod.load_env(files[1], kg)
        predict = agent.greedy
    report = evaluate(predict, env, test, vectors, cfg["update"], fp)
    write_report(report, cfg.output_dir(), seed)
    LOG.info("eval fingerprint=%s %s", fp, " ".join(f"{m}={getattr(report, m):.6g}" for m in METRICS))
    return report


def parse_axis(text: str):
    key, values = parse_override(text)
    key = AXIS_ALIASES.get(key, key)
    if not isinstance(values, list):
        values = [values]
    if not values:
        raise ConfigError(f"axis {text!r} has no values")
    return key, values


def sweep_points(axes: Dict[str, list]) -> List[Dict[str, object]]:
    if not axes:
        raise ConfigError("sweep needs at least one axis")
    keys = list(axes)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


def cmd_sweep(cfg: RunConfig, axes: Dict[str, list]) -> List[dict]:
    """Train and evaluate every point of the cartesian product of ``axes``.

    Returns long-form rows (one per point and metric), also written to
    ``<output_dir>/sweep.csv``.
    """
    points = sweep_points(axes)
    base_out = cfg.output_dir()
    rows = []
    for point in points:
        sub = cfg.with_overrides(point)
        sub.raw["output_dir"] = str(base_out / "sweep" / sub.fingerprint())
        LOG.info("sweep point %s -> %s", point, sub.raw["output_dir"])
        cmd_train(sub)
        report = cmd_eval(sub)
        for m in METRICS:
            rows.append({**point, "fingerprint": sub.fingerprint(), "metric": m, "value": getattr(report, m)})
    base_out.mkdir(parents=True, exist_ok=True)
    cols = list(axes) + ["fingerprint", "metric", "value"]
    with open(base_out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mobprof", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="YAML run config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. --set agent.lr=0.001")
        return sp

    add("build", "parse inputs and build cached artifacts")
    add("calibrate", "calibrate reward baselines")
    sp = add("train", "train the agent")
    sp.add_argument("--resume", action="store_true", help="continue from trainer.pkl in the output dir")
    sp.add_argument("--stop-after", type=int, default=None, metavar="N", help="stop once N episodes are done")
    sp = add("eval", "evaluate a checkpoint on the test shard")
    sp.add_argument("--checkpoint", type=Path, default=None, help="directory with agent.npz and env.npz")
    sp.add_argument("--oracle", action="store_true", help="evaluate the perfect predictor instead")
    sp = add("sweep", "train and evaluate over a grid of config values")
    sp.add_argument("--axis", action="append", default=[], metavar="KEY=[V1,V2]",
                    help="e.g. --axis lambda_d=[0.1,1] --axis policy=[dqn,ddqn]")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s level=%(levelname)s logger=%(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = RunConfig.load(args.config, args.overrides)
        if args.command == "build":
            res = cmd_build(cfg)
            print(f"{'cache hit' if res.hit else 'built'} {res.fingerprint} {res.path}")
        elif args.command == "calibrate":
            b = cmd_calibrate(cfg)
            print(f"baselines d={b.d!r} c={b.c!r} p={b.p!r}")
        elif args.command == "train":
            t = cmd_train(cfg, args.resume, args.stop_after)
            print(",".join(EpisodeLog.COLUMNS))
            if t.log:
                print(t.log[-1].row())
        elif args.command == "eval":
            r = cmd_eval(cfg, args.checkpoint, args.oracle)
            print(",".join(REPORT_COLUMNS))
            print(r.row())
        elif args.command == "sweep":
            axes = dict(parse_axis(a) for a in args.axis)
            rows = cmd_sweep(cfg, axes)
            print(f"{len(rows)} rows -> {cfg.output_dir() / 'sweep.csv'}")
    except MobprofError as exc:
        LOG.error("%s", exc)
        print(f"mobprof: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
