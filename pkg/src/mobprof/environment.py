"""RL environment: the pair (user vectors, KG vectors) and its per-visit updates.

Two update strategies:

* ``up2`` -- gated long/short-term blending. Each touched vector ``a`` moves to
  ``alpha * a + (1 - alpha) * candidate`` with ``alpha = sigmoid(w . a + b)``.
* ``up1`` -- the same update order with every ``alpha`` fixed at 0.5.

Order per visit (user i at POI j): user -> visited POI -> its category and zone
tails -> sibling POIs (category relation first, then zone; ascending index).

Every call to :func:`apply_event` records an :class:`EventTrace` so the TD loss
can be pushed back into the gate/interaction parameters one step deep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, NumericalError
from .profile_init import UserTable
from .spatial_kg import BELONG_TO, LOCATE_AT, KgState, SpatialKG

ALPHA_MIN = 1e-6
ALPHA_MAX = 1.0 - 1e-6
FIXED_ALPHA = 0.5
STRATEGIES = ("up1", "up2")
GATES = ("u", "p", "t", "s")  # user, visited POI, tails, sibling POIs


class GateParams:
    """Gate rows/biases, interaction matrices and the traffic projection."""

    def __init__(self, arrays: Dict[str, np.ndarray]):
        self.arrays = arrays

    @classmethod
    def init(
        cls,
        dim: int,
        m: int,
        seed: int = 0,
        gate_scale: float = 0.01,
        user_bias: float = 0.0,
        kg_bias: float = 3.0,
    ) -> "GateParams":
        """Random gates around fixed biases.

        The default biases make users short-term (alpha ~ 0.5) and KG vectors
        long-term (alpha ~ 0.95); with no bias terms in the candidates, fast
        KG gates collapse every POI head onto the same user signal.
        """
        rng = np.random.default_rng([seed, 7])
        arrays = {}
        for k in GATES:
            arrays[f"w_{k}"] = rng.normal(0.0, gate_scale, dim)
            arrays[f"b_{k}"] = np.array(user_bias if k == "u" else kg_bias)
        for k in ("u", "p"):
            q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
            arrays[f"W_{k}"] = np.sqrt(dim) * q
        arrays["W_T"] = rng.normal(0.0, 1.0 / np.sqrt(3 * m), (dim, 3 * m))
        return cls(arrays)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    @property
    def dim(self) -> int:
        return self.arrays["W_u"].shape[0]

    @property
    def context_size(self) -> int:
        return self.arrays["W_T"].shape[1]

    def copy(self) -> "GateParams":
        return GateParams({k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> Dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}


def project_context(T_flat: np.ndarray, params: GateParams) -> np.ndarray:
    """W_T . vec(T), L2-normalised (zero stays zero)."""
    T_flat = np.asarray(T_flat, dtype=np.float64).reshape(-1)
    if T_flat.shape[0] != params.context_size:
        raise ConfigError(
            f"traffic matrix has {T_flat.shape[0]} entries, W_T expects {params.context_size}"
        )
    v = params["W_T"] @ T_flat
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def interact(x: np.ndarray, T_ctx: np.ndarray, W: np.ndarray) -> np.ndarray:
    """W . (x * T_ctx): representation modulated elementwise by traffic context."""
    return W @ (x * T_ctx)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def gate(x: np.ndarray, w: np.ndarray, b) -> float:
    return float(np.clip(_sigmoid(w @ x + b), ALPHA_MIN, ALPHA_MAX))


def _alpha(x, params: GateParams, k: str, strategy: str) -> float:
    return FIXED_ALPHA if strategy == "up1" else gate(x, params[f"w_{k}"], params[f"b_{k}"])


def blend(old: np.ndarray, candidate: np.ndarray, alpha: float) -> np.ndarray:
    return alpha * old + (1.0 - alpha) * candidate


def update_user(u_old, h_visited, T_ctx, params: GateParams, strategy: str = "up2") -> np.ndarray:
    a = _alpha(u_old, params, "u", strategy)
    return blend(u_old, interact(h_visited, T_ctx, params["W_u"]), a)


def update_visited_poi(h_old, u_old, T_ctx, params: GateParams, strategy: str = "up2") -> np.ndarray:
    a = _alpha(h_old, params, "p", strategy)
    return blend(h_old, interact(u_old, T_ctx, params["W_p"]), a)


def update_tails(h_new, rel_belong, rel_locate, t_cat, t_zone, params: GateParams, strategy: str = "up2"):
    a_c = _alpha(t_cat, params, "t", strategy)
    a_z = _alpha(t_zone, params, "t", strategy)
    return blend(t_cat, h_new + rel_belong, a_c), blend(t_zone, h_new + rel_locate, a_z)


def update_sibling_pois(
    kg_state: KgState,
    kg: SpatialKG,
    poi: int,
    t_new: Dict[int, np.ndarray],
    params: GateParams,
    strategy: str = "up2",
) -> List[Tuple[int, int]]:
    """In-place sibling update; ``t_new`` maps relation -> updated tail vector.

    Returns the (relation, poi) update order.
    """
    order = kg.siblings(poi)
    for rel, q in order:
        h = kg_state.heads[q]
        a = _alpha(h, params, "s", strategy)
        kg_state.heads[q] = blend(h, t_new[rel] - kg_state.rel[rel], a)
    return order


@dataclass(frozen=True)
class EventTrace:
    """Inputs of one apply_event call; enough to replay it differentiably."""

    user_row: int
    poi: int
    strategy: str
    T_flat: np.ndarray
    u_old: np.ndarray
    h_old: np.ndarray
    tail_idx: Tuple[int, int]  # (category tail row, zone tail row)
    t_old: Tuple[np.ndarray, np.ndarray]
    rel: np.ndarray
    siblings: Tuple[Tuple[int, int], ...]
    sibling_old: Dict[int, np.ndarray]


@dataclass
class EnvState:
    users: UserTable
    kg_state: KgState
    kg: SpatialKG
    params: GateParams
    step: int = 0
    user_traces: Dict[int, EventTrace] = field(default_factory=dict)
    last_trace: Optional[EventTrace] = None

    def snapshot(self) -> "EnvState":
        """Independent copy; gate parameters are shared unless copied separately."""
        return EnvState(
            self.users.copy(),
            self.kg_state.copy(),
            self.kg,
            self.params,
            self.step,
            dict(self.user_traces),
            self.last_trace,
        )

    def restore(self, other: "EnvState") -> None:
        """Reset vectors/step/traces to ``other`` (keeps this state's params)."""
        self.users = other.users.copy()
        self.kg_state = other.kg_state.copy()
        self.step = other.step
        self.user_traces = dict(other.user_traces)
        self.last_trace = other.last_trace


def apply_event(state: EnvState, user_id: str, poi_id: str, T_flat: np.ndarray, strategy: str = "up2") -> EnvState:
    """Apply the true visit (user_id, poi_id) under traffic context T_flat."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown update strategy {strategy!r}")
    kg, ks, params = state.kg, state.kg_state, state.params
    row = state.users.row(user_id)
    p = kg.poi(poi_id)
    T_flat = np.asarray(T_flat, dtype=np.float64).reshape(-1)
    T_ctx = project_context(T_flat, params)

    u_old = state.users.vectors[row].copy()
    h_old = ks.heads[p].copy()
    ci = int(kg.poi_category[p])
    zi = kg.n_categories + int(kg.poi_zone[p])
    t_old = (ks.tails[ci].copy(), ks.tails[zi].copy())
    siblings = kg.siblings(p)
    sibling_old = {q: ks.heads[q].copy() for _, q in siblings}

    u_new = update_user(u_old, h_old, T_ctx, params, strategy)
    h_new = update_visited_poi(h_old, u_old, T_ctx, params, strategy)
    t_cat, t_zone = update_tails(h_new, ks.rel[BELONG_TO], ks.rel[LOCATE_AT], t_old[0], t_old[1], params, strategy)

    state.users.vectors[row] = u_new
    ks.heads[p] = h_new
    ks.tails[ci] = t_cat
    ks.tails[zi] = t_zone
    update_sibling_pois(ks, kg, p, {BELONG_TO: t_cat, LOCATE_AT: t_zone}, params, strategy)

    if not (np.isfinite(u_new).all() and np.isfinite(h_new).all() and np.isfinite(ks.tails[[ci, zi]]).all()):
        raise NumericalError("non-finite state after update", {"user": user_id, "poi": poi_id, "step": state.step})

    trace = EventTrace(
        user_row=row,
        poi=p,
        strategy=strategy,
        T_flat=T_flat,
        u_old=u_old,
        h_old=h_old,
        tail_idx=(ci, zi),
        t_old=t_old,
        rel=ks.rel.copy(),
        siblings=tuple(siblings),
        sibling_old=sibling_old,
    )
    state.user_traces[row] = trace
    state.last_trace = trace
    state.step += 1
    return state


# --- backward -------------------------------------------------------------


def _blend_backward(gy, a, c, alpha, x_gate, params, k, strategy, grads):
    """Backprop through y = alpha*a + (1-alpha)*c with alpha = gate(x_gate).

    Accumulates parameter gradients, returns dL/dc. ``a`` is a state input
    (no gradient), so dL/da is not needed.
    """
    if strategy == "up2" and ALPHA_MIN < alpha < ALPHA_MAX:
        gz = float(gy @ (a - c)) * alpha * (1.0 - alpha)
        grads[f"w_{k}"] += gz * x_gate
        grads[f"b_{k}"] += gz
    return (1.0 - alpha) * gy


def _blend_backward_chained(gy, a, c, alpha, params, k, strategy, grads):
    """As _blend_backward but ``a`` itself depends on parameters: returns (dL/da, dL/dc)."""
    ga = alpha * gy
    if strategy == "up2" and ALPHA_MIN < alpha < ALPHA_MAX:
        gz = float(gy @ (a - c)) * alpha * (1.0 - alpha)
        grads[f"w_{k}"] += gz * a
        grads[f"b_{k}"] += gz
        ga = ga + gz * params[f"w_{k}"]
    return ga, (1.0 - alpha) * gy


def _context_backward(g_ctx, T_flat, params, grads):
    v = params["W_T"] @ T_flat
    n = np.linalg.norm(v)
    if n == 0:
        return
    t = v / n
    gv = (g_ctx - t * (t @ g_ctx)) / n
    grads["W_T"] += np.outer(gv, T_flat)


def user_backward(trace: EventTrace, g_u: np.ndarray, params: GateParams, grads: Dict[str, np.ndarray]) -> None:
    """Accumulate dL/dparams given dL/d(user vector produced by ``trace``)."""
    s = trace.strategy
    T_ctx = project_context(trace.T_flat, params)
    x = trace.h_old * T_ctx
    c = params["W_u"] @ x
    alpha = _alpha(trace.u_old, params, "u", s)
    gc = _blend_backward(g_u, trace.u_old, c, alpha, trace.u_old, params, "u", s, grads)
    grads["W_u"] += np.outer(gc, x)
    _context_backward((params["W_u"].T @ gc) * trace.h_old, trace.T_flat, params, grads)


def kg_backward(
    trace: EventTrace,
    g_pool: np.ndarray,
    weights: Tuple[float, float, float],
    params: GateParams,
    grads: Dict[str, np.ndarray],
) -> None:
    """Accumulate dL/dparams for the KG vectors written by ``trace``.

    The pooled KG vector is linear in each stored vector; ``weights`` are the
    pooling coefficients of (a POI head, a category tail, a zone tail).
    """
    s = trace.strategy
    w_head, w_cat, w_zone = weights
    T_ctx = project_context(trace.T_flat, params)

    # forward replay
    xp = trace.u_old * T_ctx
    cp = params["W_p"] @ xp
    a_p = _alpha(trace.h_old, params, "p", s)
    h_new = blend(trace.h_old, cp, a_p)
    tails_new, tail_fwd = [], []
    for k, rel in enumerate((BELONG_TO, LOCATE_AT)):
        t_old = trace.t_old[k]
        c = h_new + trace.rel[rel]
        a = _alpha(t_old, params, "t", s)
        tails_new.append(blend(t_old, c, a))
        tail_fwd.append((t_old, c, a))
    cur = dict(trace.sibling_old)
    sib_fwd = []
    for rel, q in trace.siblings:
        a_in = cur[q]
        c = tails_new[rel] - trace.rel[rel]
        a = _alpha(a_in, params, "s", s)
        cur[q] = blend(a_in, c, a)
        sib_fwd.append((rel, q, a_in, c, a))

    # reverse pass
    g_h = {q: w_head * g_pool for q in cur}
    g_t = [w_cat * g_pool, w_zone * g_pool]
    for rel, q, a_in, c, a in reversed(sib_fwd):
        ga, gc = _blend_backward_chained(g_h[q], a_in, c, a, params, "s", s, grads)
        g_h[q] = ga
        g_t[rel] = g_t[rel] + gc
    g_hnew = w_head * g_pool
    for k in range(2):
        t_old, c, a = tail_fwd[k]
        g_hnew = g_hnew + _blend_backward(g_t[k], t_old, c, a, t_old, params, "t", s, grads)
    gcp = _blend_backward(g_hnew, trace.h_old, cp, a_p, trace.h_old, params, "p", s, grads)
    grads["W_p"] += np.outer(gcp, xp)
    _context_backward((params["W_p"].T @ gcp) * trace.u_old, trace.T_flat, params, grads)


def replay_user(trace: EventTrace, params: GateParams) -> np.ndarray:
    """Recompute the user vector produced by ``trace`` under ``params``."""
    T_ctx = project_context(trace.T_flat, params)
    return update_user(trace.u_old, trace.h_old, T_ctx, params, trace.strategy)


def replay_kg_vectors(trace: EventTrace, params: GateParams) -> Dict[str, np.ndarray]:
    """Recompute every KG vector written by ``trace`` (for gradient checks)."""
    s = trace.strategy
    T_ctx = project_context(trace.T_flat, params)
    h_new = update_visited_poi(trace.h_old, trace.u_old, T_ctx, params, s)
    t_cat, t_zone = update_tails(h_new, trace.rel[BELONG_TO], trace.rel[LOCATE_AT], *trace.t_old, params, s)
    tails = {BELONG_TO: t_cat, LOCATE_AT: t_zone}
    cur = dict(trace.sibling_old)
    for rel, q in trace.siblings:
        a = _alpha(cur[q], params, "s", s)
        cur[q] = blend(cur[q], tails[rel] - trace.rel[rel], a)
    return {"head": h_new, "cat": t_cat, "zone": t_zone, "siblings": cur}


def save_env(path, state: EnvState, **meta) -> None:
    arrays = {f"param_{k}": v for k, v in state.params.arrays.items()}
    with open(path, "wb") as fh:
        np.savez(
            fh,
            **{f"meta_{k}": np.array(str(v)) for k, v in meta.items()},
            format_version=np.array(1),
            step=np.array(state.step),
            user_ids=np.array(state.users.user_ids, dtype=str),
            users=state.users.vectors,
            heads=state.kg_state.heads,
            tails=state.kg_state.tails,
            rel=state.kg_state.rel,
            **arrays,
        )


def load_env(path, kg: SpatialKG) -> EnvState:
    with np.load(path) as z:
        params = GateParams({k[len("param_"):]: z[k].copy() for k in z.files if k.startswith("param_")})
        users = UserTable([str(u) for u in z["user_ids"]], z["users"].copy())
        ks = KgState(z["heads"].copy(), z["tails"].copy(), z["rel"].copy())
        return EnvState(users, ks, kg, params, int(z["step"]))
