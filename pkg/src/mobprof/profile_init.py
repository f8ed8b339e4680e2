"""Initial user vectors from the earliest slice of each user's check-ins."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, LookupFailure
from .ingest import CheckinEvent


@dataclass
class MobilityGraph:
    user_id: str
    nodes: List[str]  # category ids, sorted
    weights: Dict[tuple, float]  # (from, to) -> transition count

    def matrix(self, order: Optional[Sequence[str]] = None) -> np.ndarray:
        order = list(order) if order is not None else self.nodes
        idx = {c: i for i, c in enumerate(order)}
        w = np.zeros((len(order), len(order)))
        for (a, b), v in self.weights.items():
            w[idx[a], idx[b]] += v
        return w


def build_mobility_graph(events: Sequence[CheckinEvent], fraction: float = 0.1) -> MobilityGraph:
    """Category transition graph over the first ceil(fraction * n) events."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction must lie in (0, 1]")
    if not events:
        raise ConfigError("user has no events")
    head = list(events)[: math.ceil(fraction * len(events))]
    weights: Dict[tuple, float] = defaultdict(float)
    for prev, cur in zip(head, head[1:]):
        weights[(prev.category_id, cur.category_id)] += 1.0
    return MobilityGraph(
        user_id=head[0].user_id,
        nodes=sorted({e.category_id for e in head}),
        weights=dict(weights),
    )


def stationary_distribution(w: np.ndarray, tol: float = 1e-13, max_iter: int = 10_000) -> np.ndarray:
    """Stationary vector of the row-normalised chain.

    Rows without out-edges jump uniformly; the lazy chain (I + P) / 2 is
    iterated from the uniform start, which also handles periodic chains.
    """
    n = len(w)
    out = w.sum(axis=1, keepdims=True)
    p = np.where(out > 0, w / np.where(out > 0, out, 1.0), 1.0 / n)
    lazy = 0.5 * (np.eye(n) + p)
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = pi @ lazy
        if np.abs(nxt - pi).sum() < tol:
            pi = nxt
            break
        pi = nxt
    return pi / pi.sum()


def _spectral_lite(graph: MobilityGraph, categories: Sequence[str], dim: int, rng) -> np.ndarray:
    pi = stationary_distribution(graph.matrix())
    full = np.zeros(len(categories))
    pos = {c: i for i, c in enumerate(categories)}
    for c, v in zip(graph.nodes, pi):
        full[pos[c]] = v
    vec = np.zeros(dim)
    k = min(dim, len(full))
    vec[:k] = full[:k]
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec + rng.normal(0.0, 0.01, dim)


def _random(graph: MobilityGraph, categories: Sequence[str], dim: int, rng) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(dim), dim)


INITIALIZERS: Dict[str, Callable] = {
    "spectral-lite": _spectral_lite,
    "random": _random,
}


def register_initializer(name: str, fn: Callable) -> None:
    """Plug in another initializer: fn(graph, categories, dim, rng) -> vector."""
    INITIALIZERS[name] = fn


@dataclass
class UserTable:
    user_ids: List[str]
    vectors: np.ndarray  # (n_users, N)
    seed: int = 0
    method: str = "spectral-lite"

    def __post_init__(self):
        self.index = {u: i for i, u in enumerate(self.user_ids)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def row(self, user_id: str) -> int:
        try:
            return self.index[user_id]
        except KeyError:
            raise LookupFailure(f"unknown user {user_id!r}") from None

    def __getitem__(self, user_id: str) -> np.ndarray:
        return self.vectors[self.row(user_id)]

    def copy(self) -> "UserTable":
        return UserTable(list(self.user_ids), self.vectors.copy(), self.seed, self.method)


def init_user_states(
    graphs: Mapping[str, MobilityGraph],
    dim: int = 200,
    method: str = "spectral-lite",
    seed: int = 0,
    categories: Optional[Sequence[str]] = None,
) -> UserTable:
    if dim < 2:
        raise ConfigError("user dim must be >= 2")
    try:
        fn = INITIALIZERS[method]
    except KeyError:
        raise ConfigError(f"unknown initializer {method!r}; known: {sorted(INITIALIZERS)}") from None
    if categories is None:
        categories = sorted({c for g in graphs.values() for c in g.nodes})
    users = sorted(graphs)
    vecs = np.zeros((len(users), dim))
    for i, u in enumerate(users):
        rng = np.random.default_rng([seed, i])
        vecs[i] = fn(graphs[u], categories, dim, rng)
    return UserTable(users, vecs, seed, method)


def events_by_user(events: Sequence[CheckinEvent]) -> Dict[str, List[CheckinEvent]]:
    out: Dict[str, List[CheckinEvent]] = defaultdict(list)
    for e in events:
        out[e.user_id].append(e)
    return dict(out)


def save_user_table(path, table: UserTable, **meta) -> None:
    with open(path, "wb") as fh:
        np.savez(
            fh,
            **{f"meta_{k}": np.array(str(v)) for k, v in meta.items()},
            format_version=np.array(1),
            user_ids=np.array(table.user_ids, dtype=str),
            vectors=table.vectors,
            seed=np.array(table.seed),
            method=np.array(table.method),
        )


def load_user_table(path) -> UserTable:
    with np.load(path) as z:
        return UserTable(
            [str(u) for u in z["user_ids"]], z["vectors"].copy(), int(z["seed"]), str(z["method"])
        )
