"""Next-visit planner: Q-networks, KG pooling, DQN/Double-DQN targets and the
imitation training loop."""

from __future__ import annotations

import json
import logging
import pickle
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import environment as envmod
from .errors import ConfigError, LookupFailure, NumericalError
from .replay import ReplayMemory, Transition, priority_reward, priority_td
from .reward import CategoryVectors, RewardBaselines, RewardWeights, components, distance_km, reward
from .spatial_kg import KgState, SpatialKG

LOG = logging.getLogger(__name__)

VARIANTS = ("dqn", "ddqn")
PRIORITIES = ("reward", "td")


class QNetwork:
    """Fully connected ReLU network, float64, plain SGD."""

    def __init__(self, sizes: Sequence[int], seed: int = 0):
        self.sizes = list(sizes)
        rng = np.random.default_rng([seed, 11])
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(self.sizes, self.sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_actions(self) -> int:
        return self.sizes[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.atleast_2d(x)
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def loss_and_grad(self, x: np.ndarray, actions: np.ndarray, targets: np.ndarray):
        """Mean squared TD error on the taken actions.

        Returns (loss, weight grads, bias grads, dloss/dx).
        """
        acts = [np.atleast_2d(x)]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ W + b
            acts.append(np.maximum(z, 0.0) if i < last else z)
        q = acts[-1]
        n = len(q)
        rows = np.arange(n)
        err = q[rows, actions] - targets
        loss = float(np.mean(err**2))
        g = np.zeros_like(q)
        g[rows, actions] = 2.0 * err / n
        gW, gb = [None] * len(self.weights), [None] * len(self.weights)
        for i in range(last, -1, -1):
            gW[i] = acts[i].T @ g
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                g = g * (acts[i] > 0)
        return loss, gW, gb, g

    def sgd(self, gW, gb, lr: float) -> None:
        for W, b, dW, db in zip(self.weights, self.biases, gW, gb):
            W -= lr * dW
            b -= lr * db

    def copy(self) -> "QNetwork":
        out = QNetwork.__new__(QNetwork)
        out.sizes = list(self.sizes)
        out.weights = [w.copy() for w in self.weights]
        out.biases = [b.copy() for b in self.biases]
        return out

    def load_from(self, other: "QNetwork") -> None:
        self.weights = [w.copy() for w in other.weights]
        self.biases = [b.copy() for b in other.biases]

    def arrays(self, prefix: str) -> Dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}_W{i}"] = W
            out[f"{prefix}_b{i}"] = b
        return out


def pool_weights(kg: SpatialKG) -> Tuple[float, float, float]:
    """Pooling coefficients of one POI head, one category tail, one zone tail."""
    nb = kg.n_pois + kg.n_categories
    nl = kg.n_pois + kg.n_zones
    return 0.5 / nb + 0.5 / nl, 0.5 / nb, 0.5 / nl


def pool_kg(kg_state: KgState, kg: SpatialKG) -> np.ndarray:
    """Hierarchical average pooling.

    Average the nodes of the belong_to graph (POIs + categories) and of the
    locate_at graph (POIs + zones) separately, then average the two.
    """
    heads = kg_state.heads
    cats = kg_state.tails[: kg.n_categories]
    zones = kg_state.tails[kg.n_categories :]
    branches = []
    for tails in (cats, zones):
        nodes = np.concatenate([heads, tails]) if len(heads) or len(tails) else None
        branches.append(nodes.mean(axis=0) if nodes is not None and len(nodes) else np.zeros(heads.shape[1]))
    return 0.5 * (branches[0] + branches[1])


def state_vector(env: envmod.EnvState, user_id: str) -> np.ndarray:
    return np.concatenate([env.users[user_id], pool_kg(env.kg_state, env.kg)])


def q_forward(net: QNetwork, u: np.ndarray, g: np.ndarray) -> np.ndarray:
    return net.forward(np.concatenate([u, g])[None])[0]


def select_action(q_values: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy; greedy ties go to the lowest index."""
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(len(q_values)))
    return int(np.argmax(q_values))


def compute_target(variant: str, reward, q_e_next, q_t_next, gamma: float):
    """dqn: r + g * max Q_t(s').  ddqn: r + g * Q_t(s', argmax Q_e(s'))."""
    scalar = np.ndim(reward) == 0 and np.ndim(q_e_next) == 1
    q_e_next = np.atleast_2d(q_e_next)
    q_t_next = np.atleast_2d(q_t_next)
    if variant == "dqn":
        nxt = q_t_next.max(axis=1)
    elif variant == "ddqn":
        best = np.argmax(q_e_next, axis=1)
        nxt = q_t_next[np.arange(len(q_t_next)), best]
    else:
        raise ConfigError(f"unknown policy variant {variant!r}")
    y = np.asarray(reward, dtype=np.float64) + gamma * nxt
    return float(y[0]) if scalar else y


def sync_target(q_e: QNetwork, q_t: QNetwork, step: int, every: int) -> bool:
    if every < 1:
        raise ConfigError("target sync interval must be >= 1")
    if step % every == 0:
        q_t.load_from(q_e)
        return True
    return False


@dataclass
class AgentConfig:
    gamma: float = 0.9
    lr: float = 1e-5
    variant: str = "ddqn"
    priority: str = "td"
    hidden: Tuple[int, ...] = (256, 128)
    batch_size: int = 32
    capacity: int = 50_000
    train_every: int = 1
    learning_starts: int = 32
    sync_every: int = 100
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_frac: float = 0.5
    train_env: bool = True
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.priority not in PRIORITIES:
            raise ConfigError(f"priority must be one of {PRIORITIES}")
        if self.sync_every < 1 or self.train_every < 1:
            raise ConfigError("sync_every and train_every must be >= 1")


def epsilon_at(step: int, total_steps: int, cfg: AgentConfig) -> float:
    span = cfg.epsilon_decay_frac * total_steps
    if span <= 0 or step >= span:
        return cfg.epsilon_end
    return cfg.epsilon_start + (step / span) * (cfg.epsilon_end - cfg.epsilon_start)


class Agent:
    def __init__(self, state_dim: int, n_actions: int, cfg: AgentConfig):
        self.cfg = cfg
        self.q_e = QNetwork([state_dim, *cfg.hidden, n_actions], seed=cfg.seed)
        self.q_t = self.q_e.copy()
        self.rng = np.random.default_rng([cfg.seed, 3])
        self.step = 0
        self.epsilon = cfg.epsilon_start

    def greedy(self, env: envmod.EnvState, event) -> int:
        return int(np.argmax(self.q_e.forward(state_vector(env, event.user_id))[0]))

    def act(self, x: np.ndarray, epsilon: float) -> int:
        return select_action(self.q_e.forward(x)[0], epsilon, self.rng)


def train_step(
    batch: Sequence[Transition],
    q_e: QNetwork,
    q_t: QNetwork,
    cfg: AgentConfig,
    env: Optional[envmod.EnvState] = None,
) -> float:
    """One SGD step on the mean squared TD error over ``batch``.

    When ``env`` is given and cfg.train_env is set, the same loss is pushed
    through the gated update that produced each sampled state (one step deep).
    """
    x = np.stack([t.state for t in batch])
    xn = np.stack([t.next_state for t in batch])
    acts = np.array([t.action for t in batch])
    r = np.array([t.reward for t in batch])
    y = compute_target(cfg.variant, r, q_e.forward(xn), q_t.forward(xn), cfg.gamma)
    y = np.atleast_1d(y)
    loss, gW, gb, gx = q_e.loss_and_grad(x, acts, y)
    if not np.isfinite(loss):
        raise NumericalError(
            "non-finite TD loss",
            {"rewards": r.tolist(), "targets": y.tolist(), "actions": acts.tolist()},
        )
    q_e.sgd(gW, gb, cfg.lr)
    if env is not None and cfg.train_env:
        grads = env.params.zeros_like()
        n_user = env.users.dim
        weights = pool_weights(env.kg)
        touched = False
        for t, g in zip(batch, gx):
            if t.user_trace is not None:
                envmod.user_backward(t.user_trace, g[:n_user], env.params, grads)
                touched = True
            if t.kg_trace is not None:
                envmod.kg_backward(t.kg_trace, g[n_user:], weights, env.params, grads)
                touched = True
        if touched:
            for k, v in env.params.arrays.items():
                v -= cfg.lr * grads[k]
    return loss


@dataclass
class RewardConfig:
    variant: str = "r2"
    weights: RewardWeights = field(default_factory=RewardWeights)
    baselines: RewardBaselines = field(default_factory=RewardBaselines)


@dataclass
class EpisodeLog:
    episode: int
    steps: int
    loss: float
    reward: float
    accuracy: float
    avg_dist_km: float
    epsilon: float

    COLUMNS = ("episode", "steps", "loss", "reward", "accuracy", "avg_dist_km", "epsilon")

    def row(self) -> str:
        return ",".join(repr(getattr(self, c)) for c in self.COLUMNS)


class Trainer:
    """Imitation loop over a chronological (event, traffic vector) stream.

    Each episode is one pass over ``stream`` starting from the initial
    environment state; gate parameters and networks carry over. The true
    visit always drives the environment, never the prediction.
    """

    def __init__(
        self,
        env: envmod.EnvState,
        agent: Agent,
        stream: Sequence,
        vectors: CategoryVectors,
        reward_cfg: RewardConfig,
        episodes: int,
        strategy: str = "up2",
    ):
        self.env = env
        self.agent = agent
        self.stream = list(stream)
        self.vectors = vectors
        self.reward_cfg = reward_cfg
        self.episodes = episodes
        self.strategy = strategy
        self.memory = ReplayMemory(agent.cfg.capacity)
        self.initial = env.snapshot()
        self.log: List[EpisodeLog] = []
        self.episode = 0
        self.apply = envmod.apply_event

    @property
    def total_steps(self) -> int:
        return self.episodes * len(self.stream)

    def run(self, until: Optional[int] = None) -> List[EpisodeLog]:
        if not self.stream:
            return self.log
        stop = self.episodes if until is None else min(until, self.episodes)
        while self.episode < stop:
            self.log.append(self._episode())
            self.episode += 1
        return self.log

    def _episode(self) -> EpisodeLog:
        env, agent, cfg = self.env, self.agent, self.agent.cfg
        kg = env.kg
        env.restore(self.initial)
        losses, rewards, hits, dists = [], [], [], []
        for event, T_flat in self.stream:
            try:
                true = kg.poi(event.poi_id)
                x = state_vector(env, event.user_id)
            except LookupFailure as exc:
                LOG.warning("skipping event: %s", exc)
                continue
            agent.epsilon = epsilon_at(agent.step, self.total_steps, cfg)
            action = agent.act(x, agent.epsilon)
            comp = components(true, action, kg, self.vectors)
            r = reward(comp, self.reward_cfg.weights, self.reward_cfg.variant, self.reward_cfg.baselines)
            row = env.users.row(event.user_id)
            user_trace, kg_trace = env.user_traces.get(row), env.last_trace
            self.apply(env, event.user_id, event.poi_id, T_flat, self.strategy)
            t = Transition(x, action, r, state_vector(env, event.user_id), 0.0, user_trace, kg_trace)
            t.priority = r if cfg.priority == "reward" else priority_td(t, agent.q_e, cfg.gamma)
            self.memory.push(t)
            rewards.append(r)
            hits.append(comp[2])
            dists.append(distance_km(kg.poi_coords[true], kg.poi_coords[action]))
            agent.step += 1
            if len(self.memory) >= cfg.learning_starts and agent.step % cfg.train_every == 0:
                idx = self.memory.sample_indices(cfg.batch_size, agent.rng)
                batch = [self.memory[i] for i in idx]
                losses.append(train_step(batch, agent.q_e, agent.q_t, cfg, env))
                if cfg.priority == "td":
                    for i in np.unique(idx):
                        self.memory[i].priority = priority_td(self.memory[i], agent.q_e, cfg.gamma)
            sync_target(agent.q_e, agent.q_t, agent.step, cfg.sync_every)
        n = max(len(self.stream), 1)
        return EpisodeLog(
            episode=self.episode,
            steps=agent.step,
            loss=float(np.mean(losses)) if losses else 0.0,
            reward=float(np.sum(rewards) / n),
            accuracy=float(np.sum(hits) / n),
            avg_dist_km=float(np.sum(dists) / n),
            epsilon=float(agent.epsilon),
        )

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            pickle.dump(self, fh, protocol=4)

    @staticmethod
    def load(path) -> "Trainer":
        with open(path, "rb") as fh:
            return pickle.load(fh)


def run_training(env, agent, stream, vectors, reward_cfg, episodes, strategy="up2") -> Trainer:
    trainer = Trainer(env, agent, stream, vectors, reward_cfg, episodes, strategy)
    trainer.run()
    return trainer


def save_agent(path, agent: Agent, **meta) -> None:
    cfg = json.dumps(asdict(agent.cfg), sort_keys=True)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            **{f"meta_{k}": np.array(str(v)) for k, v in meta.items()},
            format_version=np.array(1),
            sizes=np.array(agent.q_e.sizes),
            step=np.array(agent.step),
            epsilon=np.array(agent.epsilon),
            seed=np.array(agent.cfg.seed),
            config=np.array(cfg),
            **agent.q_e.arrays("qe"),
            **agent.q_t.arrays("qt"),
        )


def load_agent(path) -> Agent:
    with np.load(path) as z:
        cfg = AgentConfig(**json.loads(str(z["config"])))
        sizes = [int(s) for s in z["sizes"]]
        agent = Agent(sizes[0], sizes[-1], cfg)
        for net, prefix in ((agent.q_e, "qe"), (agent.q_t, "qt")):
            net.weights = [z[f"{prefix}_W{i}"].copy() for i in range(len(sizes) - 1)]
            net.biases = [z[f"{prefix}_b{i}"].copy() for i in range(len(sizes) - 1)]
        agent.step = int(z["step"])
        agent.epsilon = float(z["epsilon"])
    return agent
