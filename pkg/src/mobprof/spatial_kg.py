"""Spatial knowledge graph (POI -belong_to-> category, POI -locate_at-> zone)
and TransD embeddings used to initialise its state."""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DataError, LookupFailure, NumericalError
from .ingest import OUTSIDE, CheckinEvent, GridSpec, cell_of, nearest_cell

LOG = logging.getLogger(__name__)

BELONG_TO = 0
LOCATE_AT = 1
RELATIONS = ("belong_to", "locate_at")


@dataclass
class SpatialKG:
    """POIs, categories and zones, sorted by id so indices are deterministic.

    Entity indices are global: POIs first, then categories, then zones.
    """

    poi_ids: List[str]
    category_ids: List[str]
    zone_cells: List[int]
    poi_category: np.ndarray  # index into category_ids
    poi_zone: np.ndarray  # index into zone_cells
    poi_coords: np.ndarray  # (n_pois, 2) lat, lon
    category_names: Dict[str, str]
    outside_pois: int = 0

    def __post_init__(self):
        self.poi_index = {p: i for i, p in enumerate(self.poi_ids)}
        self.category_index = {c: i for i, c in enumerate(self.category_ids)}
        self.zone_index = {z: i for i, z in enumerate(self.zone_cells)}

    @property
    def n_pois(self) -> int:
        return len(self.poi_ids)

    @property
    def n_categories(self) -> int:
        return len(self.category_ids)

    @property
    def n_zones(self) -> int:
        return len(self.zone_cells)

    @property
    def n_entities(self) -> int:
        return self.n_pois + self.n_categories + self.n_zones

    def category_entity(self, c: int) -> int:
        return self.n_pois + c

    def zone_entity(self, z: int) -> int:
        return self.n_pois + self.n_categories + z

    def entity_keys(self) -> List[str]:
        return (
            [f"poi:{p}" for p in self.poi_ids]
            + [f"cat:{c}" for c in self.category_ids]
            + [f"zone:{z}" for z in self.zone_cells]
        )

    def triplets(self) -> np.ndarray:
        """(2 * n_pois, 3) array of (head entity, relation, tail entity)."""
        heads = np.arange(self.n_pois)
        belong = np.stack(
            [heads, np.full(self.n_pois, BELONG_TO), self.n_pois + self.poi_category], axis=1
        )
        locate = np.stack(
            [
                heads,
                np.full(self.n_pois, LOCATE_AT),
                self.n_pois + self.n_categories + self.poi_zone,
            ],
            axis=1,
        )
        return np.concatenate([belong, locate]).astype(np.int64)

    def category_of(self, poi_id: str) -> str:
        return self.category_ids[self.poi_category[self.poi(poi_id)]]

    def poi(self, poi_id: str) -> int:
        try:
            return self.poi_index[poi_id]
        except KeyError:
            raise LookupFailure(f"unknown POI {poi_id!r}") from None

    def siblings(self, p: int) -> List[Tuple[int, int]]:
        """(relation, poi) pairs sharing p's category, then p's zone; ascending POI index."""
        out = [(BELONG_TO, int(q)) for q in np.flatnonzero(self.poi_category == self.poi_category[p]) if q != p]
        out += [(LOCATE_AT, int(q)) for q in np.flatnonzero(self.poi_zone == self.poi_zone[p]) if q != p]
        return out


def build_spatial_kg(events: Sequence[CheckinEvent], grid: GridSpec) -> SpatialKG:
    if not events:
        raise DataError("cannot build a KG from zero events")
    cat_votes: Dict[str, Counter] = defaultdict(Counter)
    coords: Dict[str, Tuple[float, float]] = {}
    names: Dict[str, str] = {}
    for e in events:
        cat_votes[e.poi_id][e.category_id] += 1
        coords.setdefault(e.poi_id, (e.lat, e.lon))
        names.setdefault(e.category_id, e.category_name)

    poi_ids = sorted(cat_votes)
    # majority category; ties -> smallest id
    poi_cat = {p: min(v.items(), key=lambda kv: (-kv[1], kv[0]))[0] for p, v in cat_votes.items()}
    outside = 0
    poi_cell = {}
    for p in poi_ids:
        lat, lon = coords[p]
        c = cell_of(lat, lon, grid)
        if c == OUTSIDE:
            outside += 1
            c = nearest_cell(lat, lon, grid)
        poi_cell[p] = c
    if outside:
        LOG.warning("%d POIs outside the grid bbox were snapped to boundary cells", outside)

    category_ids = sorted({poi_cat[p] for p in poi_ids})
    zone_cells = sorted(set(poi_cell.values()))
    cidx = {c: i for i, c in enumerate(category_ids)}
    zidx = {z: i for i, z in enumerate(zone_cells)}
    return SpatialKG(
        poi_ids=poi_ids,
        category_ids=category_ids,
        zone_cells=zone_cells,
        poi_category=np.array([cidx[poi_cat[p]] for p in poi_ids], dtype=np.int64),
        poi_zone=np.array([zidx[poi_cell[p]] for p in poi_ids], dtype=np.int64),
        poi_coords=np.array([coords[p] for p in poi_ids], dtype=np.float64),
        category_names={c: names[c] for c in category_ids},
        outside_pois=outside,
    )


@dataclass
class KgEmbeddings:
    dim: int
    seed: int
    entity: np.ndarray  # (E, d)
    entity_proj: np.ndarray  # (E, d)
    relation: np.ndarray  # (2, d)
    relation_proj: np.ndarray  # (2, d)
    entity_keys: List[str] = field(default_factory=list)
    loss_history: List[float] = field(default_factory=list)

    def copy(self) -> "KgEmbeddings":
        return KgEmbeddings(
            self.dim,
            self.seed,
            self.entity.copy(),
            self.entity_proj.copy(),
            self.relation.copy(),
            self.relation_proj.copy(),
            list(self.entity_keys),
            list(self.loss_history),
        )

    def params(self) -> Dict[str, np.ndarray]:
        return {
            "entity": self.entity,
            "entity_proj": self.entity_proj,
            "relation": self.relation,
            "relation_proj": self.relation_proj,
        }

    def resolve(self, e: Union[int, str]) -> int:
        if isinstance(e, str):
            try:
                return self.entity_keys.index(e)
            except ValueError:
                raise LookupFailure(f"unknown entity {e!r}") from None
        if not 0 <= int(e) < len(self.entity):
            raise LookupFailure(f"entity index {e} out of range")
        return int(e)

    def project(self, e: int, r: int) -> np.ndarray:
        """M_re e with M_re = p_r p_e^T + I."""
        v = self.entity[e]
        return v + (self.entity_proj[e] @ v) * self.relation_proj[r]


def init_embeddings(kg: SpatialKG, dim: int, seed: int) -> KgEmbeddings:
    if dim < 2:
        raise ConfigError("KG embedding dim must be >= 2")
    rng = np.random.default_rng(seed)
    bound = 6.0 / np.sqrt(dim)
    entity = rng.uniform(-bound, bound, (kg.n_entities, dim))
    entity /= np.linalg.norm(entity, axis=1, keepdims=True)
    return KgEmbeddings(
        dim=dim,
        seed=seed,
        entity=entity,
        entity_proj=np.zeros((kg.n_entities, dim)),
        relation=rng.uniform(-bound, bound, (len(RELATIONS), dim)),
        # entity projections start at zero so every mapping is exactly the
        # identity; a tiny nonzero relation projection keeps both sets trainable
        relation_proj=rng.uniform(-1e-3, 1e-3, (len(RELATIONS), dim)),
        entity_keys=kg.entity_keys(),
    )


def transd_score(h, r: int, t, emb: KgEmbeddings) -> float:
    """-||M_rh h + r - M_rt t||^2; larger means more plausible."""
    if not 0 <= int(r) < len(emb.relation):
        raise LookupFailure(f"unknown relation {r}")
    hi, ti = emb.resolve(h), emb.resolve(t)
    v = emb.project(hi, r) + emb.relation[r] - emb.project(ti, r)
    return float(-(v @ v))


def batch_scores(emb: KgEmbeddings, triplets: np.ndarray) -> np.ndarray:
    h, r, t = triplets[:, 0], triplets[:, 1], triplets[:, 2]
    v = _residual(emb.params(), h, r, t)
    return -np.einsum("ij,ij->i", v, v)


def _residual(p, h, r, t):
    E, Ep, R, Rp = p["entity"], p["entity_proj"], p["relation"], p["relation_proj"]
    hp = E[h] + np.einsum("ij,ij->i", Ep[h], E[h])[:, None] * Rp[r]
    tp = E[t] + np.einsum("ij,ij->i", Ep[t], E[t])[:, None] * Rp[r]
    return hp + R[r] - tp


def margin_loss_and_grad(
    params: Dict[str, np.ndarray], pos: np.ndarray, neg: np.ndarray, margin: float
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Summed hinge max(0, margin - score(pos) + score(neg)) over aligned rows.

    Returns the loss and gradients with the same keys/shapes as ``params``.
    """
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    if len(pos) == 0:
        return 0.0, grads
    vp = _residual(params, pos[:, 0], pos[:, 1], pos[:, 2])
    vn = _residual(params, neg[:, 0], neg[:, 1], neg[:, 2])
    terms = margin + np.einsum("ij,ij->i", vp, vp) - np.einsum("ij,ij->i", vn, vn)
    active = terms > 0
    loss = float(terms[active].sum())
    if not active.any():
        return loss, grads
    _accumulate(params, grads, pos[active], 2.0 * vp[active])
    _accumulate(params, grads, neg[active], -2.0 * vn[active])
    return loss, grads


def _accumulate(p, grads, trip, gv):
    """Backprop dL/dv = gv through v = M_rh h + r - M_rt t."""
    E, Ep, Rp = p["entity"], p["entity_proj"], p["relation_proj"]
    h, r, t = trip[:, 0], trip[:, 1], trip[:, 2]
    rp = Rp[r]
    s = np.einsum("ij,ij->i", rp, gv)  # p_r . gv
    ph_h = np.einsum("ij,ij->i", Ep[h], E[h])
    pt_t = np.einsum("ij,ij->i", Ep[t], E[t])
    np.add.at(grads["entity"], h, gv + s[:, None] * Ep[h])
    np.add.at(grads["entity_proj"], h, s[:, None] * E[h])
    np.add.at(grads["entity"], t, -(gv + s[:, None] * Ep[t]))
    np.add.at(grads["entity_proj"], t, -s[:, None] * E[t])
    np.add.at(grads["relation"], r, gv)
    np.add.at(grads["relation_proj"], r, (ph_h - pt_t)[:, None] * gv)


def _corruption_pools(kg: SpatialKG):
    tails = {
        BELONG_TO: kg.n_pois + np.arange(kg.n_categories),
        LOCATE_AT: kg.n_pois + kg.n_categories + np.arange(kg.n_zones),
    }
    tail_of = {
        BELONG_TO: kg.n_pois + kg.poi_category,
        LOCATE_AT: kg.n_pois + kg.n_categories + kg.poi_zone,
    }
    return tails, tail_of


def corrupt(kg: SpatialKG, pos: np.ndarray, neg_per_pos: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Type-compatible, filtered corruptions.

    Tail replaced with probability 0.5, head otherwise; falls back to the other
    side if one side has no valid candidate. Returns aligned (pos, neg) rows.
    """
    tails, tail_of = _corruption_pools(kg)
    out_pos, out_neg = [], []
    for h, r, t in pos:
        tail_cands = tails[r][tails[r] != t]
        head_cands = np.flatnonzero(tail_of[r] != t)
        for _ in range(neg_per_pos):
            use_tail = rng.random() < 0.5
            if use_tail and len(tail_cands) == 0:
                use_tail = False
            if not use_tail and len(head_cands) == 0:
                if len(tail_cands) == 0:
                    continue
                use_tail = True
            if use_tail:
                out_neg.append((h, r, tail_cands[rng.integers(len(tail_cands))]))
            else:
                out_neg.append((head_cands[rng.integers(len(head_cands))], r, t))
            out_pos.append((h, r, t))
    shape = (len(out_pos), 3)
    return (
        np.array(out_pos, dtype=np.int64).reshape(shape),
        np.array(out_neg, dtype=np.int64).reshape(shape),
    )


def all_corruptions(kg: SpatialKG, triplet) -> np.ndarray:
    tails, tail_of = _corruption_pools(kg)
    h, r, t = (int(x) for x in triplet)
    rows = [(h, r, int(x)) for x in tails[r] if x != t]
    rows += [(int(x), r, t) for x in np.flatnonzero(tail_of[r] != t)]
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def train_transd(
    kg: SpatialKG,
    dim: int = 200,
    epochs: int = 200,
    lr: float = 0.01,
    margin: float = 1.0,
    neg_per_pos: int = 1,
    seed: int = 0,
    resample_negatives: bool = True,
) -> KgEmbeddings:
    """Full-batch gradient descent on the margin ranking loss.

    Negatives are redrawn every epoch unless ``resample_negatives`` is False,
    in which case one draw is reused and the objective is fixed. Entity
    vectors are renormalised to unit length after each epoch.
    """
    if kg.n_pois == 0:
        raise DataError("empty KG")
    emb = init_embeddings(kg, dim, seed)
    rng = np.random.default_rng([seed, 1])
    pos_all = kg.triplets()
    params = emb.params()
    pos, neg = corrupt(kg, pos_all, neg_per_pos, rng)
    for epoch in range(epochs):
        if resample_negatives and epoch > 0:
            pos, neg = corrupt(kg, pos_all, neg_per_pos, rng)
        loss, grads = margin_loss_and_grad(params, pos, neg, margin)
        if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
            raise NumericalError(
                f"TransD loss became non-finite at epoch {epoch}",
                {"epoch": epoch, "loss": loss, "lr": lr},
            )
        emb.loss_history.append(loss)
        for k in params:
            params[k] -= lr * grads[k]
        norms = np.linalg.norm(emb.entity, axis=1, keepdims=True)
        emb.entity /= np.where(norms > 0, norms, 1.0)
    return emb


@dataclass
class KgState:
    """Mutable projected vectors: heads (POIs), tails (categories then zones), relations."""

    heads: np.ndarray  # (n_pois, d)
    tails: np.ndarray  # (n_categories + n_zones, d)
    rel: np.ndarray  # (2, d)

    def copy(self) -> "KgState":
        return KgState(self.heads.copy(), self.tails.copy(), self.rel.copy())


def export_initial_state(emb: KgEmbeddings, kg: SpatialKG) -> KgState:
    """Projected entity vectors as the starting KG state (deep copy).

    A POI has one projection per relation; its head vector is the mean of the two.
    """
    heads = np.stack(
        [0.5 * (emb.project(p, BELONG_TO) + emb.project(p, LOCATE_AT)) for p in range(kg.n_pois)]
    )
    cats = [emb.project(kg.category_entity(c), BELONG_TO) for c in range(kg.n_categories)]
    zones = [emb.project(kg.zone_entity(z), LOCATE_AT) for z in range(kg.n_zones)]
    tails = np.stack(cats + zones)
    return KgState(heads=heads.copy(), tails=tails.copy(), rel=emb.relation.copy())


def save_embeddings(path, emb: KgEmbeddings, **meta) -> None:
    with open(path, "wb") as fh:
        np.savez(
            fh,
            **{f"meta_{k}": np.array(str(v)) for k, v in meta.items()},
            format_version=np.array(1),
            dim=np.array(emb.dim),
            seed=np.array(emb.seed),
            entity_keys=np.array(emb.entity_keys, dtype=str),
            loss_history=np.array(emb.loss_history, dtype=np.float64),
            **emb.params(),
        )


def load_embeddings(path) -> KgEmbeddings:
    with np.load(path) as z:
        return KgEmbeddings(
            dim=int(z["dim"]),
            seed=int(z["seed"]),
            entity=z["entity"].copy(),
            entity_proj=z["entity_proj"].copy(),
            relation=z["relation"].copy(),
            relation_proj=z["relation_proj"].copy(),
            entity_keys=[str(k) for k in z["entity_keys"]],
            loss_history=[float(x) for x in z["loss_history"]],
        )
