"""Replay memory with softmax sampling over reward- or TD-based priorities."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Any, List, Optional

import numpy as np

from .errors import ConfigError, MobprofError


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    priority: float = 0.0
    # EventTraces that produced the user / KG halves of ``state``
    user_trace: Optional[Any] = field(default=None, repr=False)
    kg_trace: Optional[Any] = field(default=None, repr=False)


def priority_reward(t: Transition) -> float:
    return float(t.reward)


def priority_td(t: Transition, q_net, gamma: float) -> float:
    """r + gamma * max_a Q(s', a) - Q(s, a), both terms from the online net."""
    q_next = q_net.forward(t.next_state[None])[0]
    q_now = q_net.forward(t.state[None])[0, t.action]
    return float(t.reward + gamma * q_next.max() - q_now)


def softmax_probs(priorities) -> np.ndarray:
    x = np.asarray(priorities, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


class ReplayMemory:
    """FIFO ring buffer of transitions."""

    def __init__(self, capacity: int = 50_000):
        if capacity < 1:
            raise ConfigError("capacity must be positive")
        self.capacity = capacity
        self.buffer: deque = deque(maxlen=capacity)
        self.inserted = 0

    def __len__(self) -> int:
        return len(self.buffer)

    def __getitem__(self, i: int) -> Transition:
        return self.buffer[i]

    def push(self, t: Transition) -> None:
        self.buffer.append(t)
        self.inserted += 1

    def priorities(self) -> np.ndarray:
        return np.array([t.priority for t in self.buffer])

    def sample_indices(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        if not self.buffer:
            raise MobprofError("cannot sample from an empty replay memory")
        p = softmax_probs(self.priorities())
        return rng.choice(len(self.buffer), size=batch, replace=True, p=p)

    def sample(self, batch: int, rng: np.random.Generator) -> List[Transition]:
        return [self.buffer[i] for i in self.sample_indices(batch, rng)]


def sample_batch(memory: ReplayMemory, batch: int, rng: np.random.Generator) -> List[Transition]:
    """Draw ``batch`` transitions with replacement, P(i) = softmax(priorities)_i."""
    return memory.sample(batch, rng)
