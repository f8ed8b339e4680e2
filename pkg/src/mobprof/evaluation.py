"""Chronological split, greedy test rollout and the category/location metrics."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .environment import EnvState, apply_event
from .errors import DataError, LookupFailure
from .ingest import CheckinEvent
from .reward import CategoryVectors, cosine, distance_km

REPORT_COLUMNS = ("prec_cat", "rec_cat", "avg_sim", "avg_dist_km", "n_pairs", "skipped", "fingerprint")


def split_chronological(events: Sequence[CheckinEvent], train_frac: float = 0.9):
    """Per user, the first ceil(train_frac * n) events train, the rest test.

    Both shards come back merged in global time order.
    """
    per_user: Dict[str, List[CheckinEvent]] = defaultdict(list)
    for e in sorted(events, key=lambda e: e.timestamp):
        per_user[e.user_id].append(e)
    train, test = [], []
    for evs in per_user.values():
        k = math.ceil(train_frac * len(evs))
        train.extend(evs[:k])
        test.extend(evs[k:])
    key = lambda e: e.timestamp
    return sorted(train, key=key), sorted(test, key=key)


def _weighted(real: Sequence, pred: Sequence, by_pred: bool) -> float:
    if not real:
        raise DataError("no prediction pairs")
    support = Counter(real)
    total = sum(support.values())
    out = 0.0
    for k, s in support.items():
        tp = sum(1 for r, p in zip(real, pred) if r == k and p == k)
        denom = sum(1 for p in pred if p == k) if by_pred else s
        if denom:
            out += s / total * tp / denom
    return out


def prec_cat(pairs: Sequence[Tuple[str, str]]) -> float:
    """Support-weighted one-vs-rest precision over real categories."""
    real, pred = zip(*pairs) if pairs else ((), ())
    return _weighted(real, pred, by_pred=True)


def rec_cat(pairs: Sequence[Tuple[str, str]]) -> float:
    real, pred = zip(*pairs) if pairs else ((), ())
    return _weighted(real, pred, by_pred=False)


def avg_sim(pairs: Sequence[Tuple[str, str]], vectors: CategoryVectors) -> float:
    if not pairs:
        raise DataError("no prediction pairs")
    return float(np.mean([cosine(vectors[a], vectors[b]) for a, b in pairs]))


def avg_dist(pairs: Sequence[Tuple[Sequence[float], Sequence[float]]]) -> float:
    """Mean great-circle km over (real coords, predicted coords) pairs."""
    if not pairs:
        raise DataError("no prediction pairs")
    return float(np.mean([distance_km(a, b) for a, b in pairs]))


@dataclass
class EvalReport:
    prec_cat: float
    rec_cat: float
    avg_sim: float
    avg_dist_km: float
    n_pairs: int
    skipped: int = 0
    per_user: Dict[str, Dict[str, float]] = field(default_factory=dict)
    pairs: List[Tuple[str, int, int]] = field(default_factory=list, repr=False)
    fingerprint: str = ""

    def row(self, delimiter: str = ",") -> str:
        return delimiter.join(str(getattr(self, c)) for c in REPORT_COLUMNS)

    def as_dict(self) -> dict:
        return {
            "prec_cat": self.prec_cat,
            "rec_cat": self.rec_cat,
            "avg_sim": self.avg_sim,
            "avg_dist_km": self.avg_dist_km,
            "n_pairs": self.n_pairs,
            "skipped": self.skipped,
            "per_user": self.per_user,
            "fingerprint": self.fingerprint,
        }


def metrics_from_pairs(pairs, kg, vectors: CategoryVectors) -> Tuple[float, float, float, float]:
    """pairs: (user, real POI index, predicted POI index)."""
    cats = [
        (kg.category_ids[kg.poi_category[r]], kg.category_ids[kg.poi_category[p]]) for _, r, p in pairs
    ]
    coords = [(kg.poi_coords[r], kg.poi_coords[p]) for _, r, p in pairs]
    return prec_cat(cats), rec_cat(cats), avg_sim(cats, vectors), avg_dist(coords)


def evaluate(
    predict: Callable[[EnvState, CheckinEvent], int],
    env: EnvState,
    stream: Sequence,
    vectors: CategoryVectors,
    strategy: str = "up2",
    fingerprint: str = "",
) -> EvalReport:
    """Greedy rollout on a private snapshot of ``env``.

    After each prediction the true visit is applied to the snapshot. Events
    whose user or POI is unknown to the environment are skipped and counted.
    """
    if not stream:
        raise DataError("empty test stream")
    snap = env.snapshot()
    kg = env.kg
    pairs, skipped = [], 0
    for event, T_flat in stream:
        try:
            snap.users.row(event.user_id)
            real = kg.poi(event.poi_id)
        except LookupFailure:
            skipped += 1
            continue
        pred = int(predict(snap, event))
        pairs.append((event.user_id, real, pred))
        apply_event(snap, event.user_id, event.poi_id, T_flat, strategy)
    if not pairs:
        raise DataError("no evaluable test events")
    p, r, s, d = metrics_from_pairs(pairs, kg, vectors)
    per_user = {}
    for u in sorted({u for u, _, _ in pairs}):
        sub = [x for x in pairs if x[0] == u]
        up, ur, us, ud = metrics_from_pairs(sub, kg, vectors)
        per_user[u] = {"prec_cat": up, "rec_cat": ur, "avg_sim": us, "avg_dist_km": ud, "n": len(sub)}
    return EvalReport(p, r, s, d, len(pairs), skipped, per_user, pairs, fingerprint)
