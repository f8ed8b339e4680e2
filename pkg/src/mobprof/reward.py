"""Reward components (distance, category similarity, exact hit) and the two
reward variants: plain weighted sum (r1) and baseline-subtracted (r2)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError

LOG = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
MIN_DISTANCE_KM = 0.01


@dataclass(frozen=True)
class RewardWeights:
    d: float = 1.0
    c: float = 1.0
    p: float = 1.0

    def __post_init__(self):
        if min(self.d, self.c, self.p) < 0:
            raise ConfigError("reward weights must be non-negative")
        if self.d + self.c + self.p <= 0:
            raise ConfigError("at least one reward weight must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.c, self.p])


@dataclass(frozen=True)
class RewardBaselines:
    d: float = 0.0
    c: float = 0.0
    p: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.c, self.p])


class CategoryVectors:
    """Category id -> word vector (mean of token vectors; zeros when unknown)."""

    def __init__(self, vectors: Mapping[str, np.ndarray], dim: int):
        self.vectors = dict(vectors)
        self.dim = dim

    def __getitem__(self, category_id: str) -> np.ndarray:
        return self.vectors.get(category_id, np.zeros(self.dim))

    @classmethod
    def from_word_vectors(cls, names: Mapping[str, str], words: Mapping[str, np.ndarray], dim: int):
        out = {}
        for cid, name in names.items():
            toks = [words[t] for t in name.lower().split() if t in words]
            out[cid] = np.mean(toks, axis=0) if toks else np.zeros(dim)
        return cls(out, dim)


def load_word_vectors(path, vocab: Optional[Iterable[str]] = None) -> Tuple[Dict[str, np.ndarray], int]:
    """Read a GloVe-style text file: ``token v1 v2 ...`` per line.

    When ``vocab`` is given only those tokens are kept.
    """
    keep = set(vocab) if vocab is not None else None
    words: Dict[str, np.ndarray] = {}
    dim = None
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read word vectors {path}: {exc}") from exc
    with fh:
        for line in fh:
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            if dim is None:
                dim = len(parts) - 1
            elif len(parts) - 1 != dim:
                continue
            if keep is None or parts[0] in keep:
                words[parts[0]] = np.array(parts[1:], dtype=np.float64)
    if dim is None:
        raise DataError(f"{path}: no word vectors")
    return words, dim


def distance_km(a: Sequence[float], b: Sequence[float]) -> float:
    """Great-circle (haversine) distance between two (lat, lon) points."""
    lat1, lon1, lat2, lon2 = map(math.radians, (a[0], a[1], b[0], b[1]))
    s = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(s)))


def r_d(p_real, p_pred) -> float:
    return 1.0 / max(distance_km(p_real, p_pred), MIN_DISTANCE_KM)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    if np.array_equal(a, b):
        return 1.0  # exact, free of rounding
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def r_c(cat_real: str, cat_pred: str, vectors: CategoryVectors) -> float:
    return cosine(vectors[cat_real], vectors[cat_pred])


def r_p(poi_real, poi_pred) -> float:
    return 1.0 if poi_real == poi_pred else 0.0


def components(real: int, pred: int, kg, vectors: CategoryVectors) -> np.ndarray:
    """(r_d, r_c, r_p) for POI indices ``real`` and ``pred`` of ``kg``."""
    cats = kg.category_ids
    return np.array(
        [
            r_d(kg.poi_coords[real], kg.poi_coords[pred]),
            r_c(cats[kg.poi_category[real]], cats[kg.poi_category[pred]], vectors),
            r_p(real, pred),
        ]
    )


def reward_r1(comp, weights: RewardWeights) -> float:
    return float(weights.as_array() @ np.asarray(comp, dtype=np.float64))


def reward_r2(comp, weights: RewardWeights, baselines: RewardBaselines) -> float:
    return float(weights.as_array() @ (np.asarray(comp, dtype=np.float64) - baselines.as_array()))


def reward(comp, weights: RewardWeights, variant: str = "r2", baselines: Optional[RewardBaselines] = None) -> float:
    if variant == "r1":
        return reward_r1(comp, weights)
    if variant == "r2":
        return reward_r2(comp, weights, baselines or RewardBaselines())
    raise ConfigError(f"unknown reward variant {variant!r}")


def nearest_rank(samples: Sequence[float], q: float = 0.25) -> float:
    """Value at 1-based rank ceil(q * n) of the ascending sort."""
    xs = np.sort(np.asarray(samples, dtype=np.float64))
    if len(xs) == 0:
        raise DataError("no samples")
    k = max(1, math.ceil(q * len(xs)))
    return float(xs[k - 1])


@dataclass
class CalibrationReport:
    baselines: RewardBaselines
    samples: int
    rounds: int
    minimum: Tuple[float, float, float]
    maximum: Tuple[float, float, float]


def calibrate_baselines(
    env,
    stream: Sequence,
    choose: Callable,
    kg,
    vectors: CategoryVectors,
    rounds: int = 100,
    strategy: str = "up2",
) -> CalibrationReport:
    """First-quartile baselines from ``rounds`` passes of an untrained policy.

    ``stream`` holds (event, traffic vector) steps; ``choose(env, event)``
    returns a predicted POI index. ``env`` is restored afterwards.
    """
    from .environment import apply_event

    if rounds < 4:
        raise ConfigError("calibration needs at least 4 rounds")
    saved = env.snapshot()
    comps = []
    try:
        for _ in range(rounds):
            env.restore(saved)
            for event, T_flat in stream:
                pred = choose(env, event)
                comps.append(components(kg.poi(event.poi_id), pred, kg, vectors))
                apply_event(env, event.user_id, event.poi_id, T_flat, strategy)
    finally:
        env.restore(saved)
    if not comps:
        raise DataError("calibration collected no reward samples")
    c = np.array(comps)
    base = RewardBaselines(*(nearest_rank(c[:, k]) for k in range(3)))
    report = CalibrationReport(base, len(c), rounds, tuple(c.min(axis=0)), tuple(c.max(axis=0)))
    LOG.info("calibrated baselines %s from %d samples", base, len(c))
    return report
