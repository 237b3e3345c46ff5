"""Shared FIFO replay buffer for the whole actor population."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    items: np.ndarray
    feedback: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    actor_id: int


@dataclass
class TransitionBatch:
    """Column-stacked minibatch; row ``k`` is one sampled transition."""
    states: np.ndarray
    actions: np.ndarray
    items: np.ndarray
    feedback: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    actor_ids: np.ndarray

    def __len__(self) -> int:
        return self.rewards.size

    def row(self, k: int) -> Transition:
        return Transition(self.states[k], self.actions[k], self.items[k], self.feedback[k],
                          float(self.rewards[k]), self.next_states[k], bool(self.dones[k]),
                          int(self.actor_ids[k]))


class UnderfilledError(ValueError):
    pass


_FIELDS = ("state", "action", "items", "feedback", "reward", "next_state", "done", "actor_id")


class ReplayBuffer:
    """Ring storage with capacity ``C``; the oldest transition is evicted first.

    Storage arrays are allocated on the first push, once the vector widths are known.
    """

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.insertions = 0
        self._store: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return min(self.insertions, self.capacity)

    def _allocate(self, t: Transition) -> None:
        c = self.capacity
        self._store = {
            "state": np.zeros((c, np.size(t.state))),
            "action": np.zeros((c, np.size(t.action))),
            "items": np.zeros((c, np.size(t.items)), dtype=np.int64),
            "feedback": np.zeros((c, np.size(t.feedback)), dtype=np.int8),
            "reward": np.zeros(c),
            "next_state": np.zeros((c, np.size(t.next_state))),
            "done": np.zeros(c, dtype=bool),
            "actor_id": np.zeros(c, dtype=np.int64),
        }

    def push(self, t: Transition) -> None:
        if self._store is None:
            self._allocate(t)
        slot = self.insertions % self.capacity
        for name in _FIELDS:
            self._store[name][slot] = getattr(t, name)
        self.insertions += 1

    def _rows(self, idx: np.ndarray) -> TransitionBatch:
        s = self._store
        return TransitionBatch(s["state"][idx], s["action"][idx], s["items"][idx],
                               s["feedback"][idx], s["reward"][idx], s["next_state"][idx],
                               s["done"][idx], s["actor_id"][idx])

    def _draw(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if batch_size < 1:
            raise ValueError("batch size must be positive")
        if len(self) < batch_size:
            raise UnderfilledError(f"buffer holds {len(self)} transitions, need {batch_size}")
        return rng.integers(0, len(self), size=batch_size)

    def sample_minibatch(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        """Uniform draw with replacement over the live contents."""
        return self._rows(self._draw(batch_size, rng))

    def sample_states(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        return self._store["state"][self._draw(batch_size, rng)]

    def contents(self) -> TransitionBatch:
        """Live transitions, oldest first."""
        if self._store is None:
            raise UnderfilledError("buffer is empty")
        n = len(self)
        start = self.insertions - n
        idx = np.arange(start, start + n) % self.capacity
        return self._rows(idx)
