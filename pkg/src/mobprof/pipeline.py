"""Glue: parsed records -> KG, embeddings, initial environment, event streams."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .environment import EnvState, GateParams
from .errors import ConfigError
from .ingest import CheckinEvent, GridSpec, TaxiTrip, TemporalContext, compute_temporal_contexts, context_for
from .profile_init import UserTable, build_mobility_graph, events_by_user, init_user_states
from .reward import CategoryVectors
from .spatial_kg import KgEmbeddings, KgState, SpatialKG, build_spatial_kg, export_initial_state, train_transd

LOG = logging.getLogger(__name__)

Step = Tuple[CheckinEvent, np.ndarray]


def event_stream(events: Sequence[CheckinEvent], contexts: Sequence[TemporalContext], m: int) -> List[Step]:
    """Pair each event with the flattened traffic matrix in force at its time."""
    return [(e, context_for(e.timestamp, contexts, m).flat()) for e in events]


@dataclass
class Artifacts:
    kg: SpatialKG
    embeddings: KgEmbeddings
    kg_state: KgState
    users: UserTable
    contexts: List[TemporalContext]
    train: List[CheckinEvent]
    test: List[CheckinEvent]


def build_artifacts(
    events: Sequence[CheckinEvent],
    trips: Sequence[TaxiTrip],
    grid: GridSpec,
    window_len: float = 3600.0,
    dim: int = 200,
    train_frac: float = 0.9,
    profile_fraction: float = 0.1,
    init_method: str = "spectral-lite",
    transd_epochs: int = 200,
    transd_lr: float = 0.01,
    transd_margin: float = 1.0,
    seed: int = 0,
) -> Artifacts:
    """Everything needed before training, built deterministically from ``seed``.

    The KG holds every POI in ``events`` (the action space); user vectors come
    from the head of each user's training shard only.
    """
    from .evaluation import split_chronological

    train, test = split_chronological(events, train_frac)
    kg = build_spatial_kg(events, grid)
    emb = train_transd(kg, dim=dim, epochs=transd_epochs, lr=transd_lr, margin=transd_margin, seed=seed)
    kg_state = export_initial_state(emb, kg)
    graphs = {u: build_mobility_graph(evs, profile_fraction) for u, evs in events_by_user(train).items()}
    users = init_user_states(graphs, dim, init_method, seed, categories=kg.category_ids)
    contexts = compute_temporal_contexts(sorted(trips, key=lambda t: t.pickup_time), grid, window_len)
    return Artifacts(kg, emb, kg_state, users, contexts, train, test)


def make_env(
    art: Artifacts,
    grid: GridSpec,
    seed: int = 0,
    gate_scale: float = 0.01,
    user_bias: float = 0.0,
    kg_bias: float = 3.0,
) -> EnvState:
    if art.users.dim != art.kg_state.heads.shape[1]:
        raise ConfigError("user and KG dimensions must match")
    params = GateParams.init(art.users.dim, grid.m, seed, gate_scale, user_bias, kg_bias)
    return EnvState(art.users.copy(), art.kg_state.copy(), art.kg, params)
