"""Declarative run configuration (YAML) with dotted-key overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import yaml

from .agent import PRIORITIES, VARIANTS, AgentConfig
from .environment import STRATEGIES
from .errors import ConfigError
from .ingest import GridSpec
from .reward import RewardBaselines, RewardWeights

DEFAULTS: Dict[str, Any] = {
    "data": {
        "checkins": None,
        "taxi": None,
        "word_vectors": None,
        "delimiter": ",",
        "header": True,
        "checkin_columns": {},
        "taxi_columns": {},
    },
    "grid": {"lat_min": None, "lat_max": None, "lon_min": None, "lon_max": None, "rows": 10, "cols": 10},
    "window_len": 3600.0,
    "dim": 200,
    "train_frac": 0.9,
    "profile_fraction": 0.1,
    "init_method": "spectral-lite",
    "transd": {"epochs": 200, "lr": 0.01, "margin": 1.0},
    "gates": {"scale": 0.01, "user_bias": 0.0, "kg_bias": 3.0},
    "reward": {
        "variant": "r2",
        "weights": {"d": 1.0, "c": 1.0, "p": 1.0},
        "baselines": "calibrate",
        "calibration_rounds": 100,
    },
    "policy": "ddqn",
    "update": "up2",
    "priority": "td",
    "agent": {
        "gamma": 0.9,
        "lr": 1e-5,
        "hidden": [256, 128],
        "batch_size": 32,
        "capacity": 50000,
        "train_every": 1,
        "learning_starts": 32,
        "sync_every": 100,
        "epsilon_start": 1.0,
        "epsilon_end": 0.05,
        "epsilon_decay_frac": 0.5,
        "train_env": True,
    },
    "episodes": 200,
    "seed": 0,
    "output_dir": "runs",
}

# keys that determine the cached build artifacts
BUILD_KEYS = ("data", "grid", "window_len", "dim", "train_frac", "profile_fraction", "init_method", "transd", "seed")


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("checkin_columns", "taxi_columns"):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def parse_override(text: str):
    key, sep, raw = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} must look like key=value")
    return key.strip(), yaml.safe_load(raw)


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


class RunConfig:
    def __init__(self, raw: Optional[dict] = None, base_dir: Optional[Path] = None):
        self.raw = _merge(DEFAULTS, raw or {})
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()
        self.validate()

    @classmethod
    def load(cls, path, overrides: Iterable[str] = ()) -> "RunConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        merged = _merge(DEFAULTS, raw)
        for o in overrides:
            set_dotted(merged, *parse_override(o))
        return cls(merged, path.parent)

    def with_overrides(self, pairs: Dict[str, Any]) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        for k, v in pairs.items():
            set_dotted(raw, k, v)
        return RunConfig(raw, self.base_dir)

    def __getitem__(self, key):
        return self.raw[key]

    def path(self, key: str) -> Optional[Path]:
        value = self.raw["data"][key]
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self) -> None:
        r = self.raw
        if r["policy"] not in VARIANTS:
            raise ConfigError(f"policy must be one of {VARIANTS}")
        if r["update"] not in STRATEGIES:
            raise ConfigError(f"update must be one of {STRATEGIES}")
        if r["priority"] not in PRIORITIES:
            raise ConfigError(f"priority must be one of {PRIORITIES}")
        if r["reward"]["variant"] not in ("r1", "r2"):
            raise ConfigError("reward.variant must be r1 or r2")
        b = r["reward"]["baselines"]
        if not (b == "calibrate" or isinstance(b, dict)):
            raise ConfigError("reward.baselines must be 'calibrate' or a {d, c, p} mapping")
        self.weights()
        self.agent_config()

    def check_files(self) -> None:
        for key in ("checkins", "taxi", "word_vectors"):
            p = self.path(key)
            if p is None:
                raise ConfigError(f"data.{key} is not set")
            if not p.exists():
                raise ConfigError(f"data.{key}: file not found: {p}")

    def grid(self) -> GridSpec:
        g = self.raw["grid"]
        if any(g[k] is None for k in ("lat_min", "lat_max", "lon_min", "lon_max")):
            raise ConfigError("grid bounding box is not fully configured")
        return GridSpec(float(g["lat_min"]), float(g["lat_max"]), float(g["lon_min"]), float(g["lon_max"]), int(g["rows"]), int(g["cols"]))

    def weights(self) -> RewardWeights:
        w = self.raw["reward"]["weights"]
        return RewardWeights(float(w["d"]), float(w["c"]), float(w["p"]))

    def fixed_baselines(self) -> Optional[RewardBaselines]:
        b = self.raw["reward"]["baselines"]
        return None if b == "calibrate" else RewardBaselines(float(b["d"]), float(b["c"]), float(b["p"]))

    def agent_config(self) -> AgentConfig:
        a = dict(self.raw["agent"])
        return AgentConfig(variant=self.raw["policy"], priority=self.raw["priority"], seed=int(self.raw["seed"]), **a)

    def output_dir(self) -> Path:
        p = Path(self.raw["output_dir"])
        return p if p.is_absolute() else self.base_dir / p

    def _canonical(self, keys=None) -> dict:
        raw = copy.deepcopy(self.raw)
        for k in ("checkins", "taxi", "word_vectors"):
            p = self.path(k)
            raw["data"][k] = _file_digest(p) if p is not None and p.is_file() else (str(p) if p else None)
        raw.pop("output_dir")
        return {k: raw[k] for k in keys} if keys else raw

    def fingerprint(self, keys=None) -> str:
        blob = json.dumps(self._canonical(keys), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def build_fingerprint(self) -> str:
        return self.fingerprint(BUILD_KEYS)

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)
