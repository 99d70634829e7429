"""Fixed-capacity FIFO replay memory of ``(S, a, R, S')`` transitions."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..exceptions import InsufficientData, InvalidInput, ShapeMismatch


@dataclass
class Minibatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    def __len__(self):
        return len(self.actions)


class ReplayBuffer:
    """Ring buffer; once full, each push overwrites the oldest transition."""

    def __init__(self, capacity: int = 20000, state_dim: int | None = None):
        if capacity < 1:
            raise InvalidInput("capacity must be positive")
        self.capacity = int(capacity)
        self.state_dim = state_dim
        self._pos = 0
        self._size = 0
        self._alloc(state_dim)

    def _alloc(self, state_dim):
        if state_dim is None:
            self.states = self.next_states = None
        else:
            self.states = np.zeros((self.capacity, state_dim))
            self.next_states = np.zeros((self.capacity, state_dim))
        self.actions = np.zeros(self.capacity, dtype=np.int64)
        self.rewards = np.zeros(self.capacity)

    def __len__(self):
        return self._size

    def push(self, state, action, reward, next_state) -> None:
        state = np.asarray(state, dtype=float).ravel()
        next_state = np.asarray(next_state, dtype=float).ravel()
        if self.states is None:
            self.state_dim = state.size
            self._alloc(state.size)
        if state.size != self.state_dim or next_state.size != self.state_dim:
            raise ShapeMismatch(f"state width must be {self.state_dim}")
        i = self._pos
        self.states[i] = state
        self.actions[i] = int(action)
        self.rewards[i] = float(reward)
        self.next_states[i] = next_state
        self._pos = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def order(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        start = self._pos if self._size == self.capacity else 0
        return (start + np.arange(self._size)) % self.capacity

    def contents(self) -> Minibatch:
        idx = self.order()
        return self._gather(idx)

    def _gather(self, idx) -> Minibatch:
        if self.states is None:
            empty = np.zeros((0, 0))
            return Minibatch(empty, self.actions[:0].copy(), self.rewards[:0].copy(), empty.copy())
        return Minibatch(self.states[idx].copy(), self.actions[idx].copy(),
                         self.rewards[idx].copy(), self.next_states[idx].copy())

    def sample(self, batch: int, rng) -> Minibatch:
        if batch > self._size:
            raise InsufficientData(f"replay holds {self._size} transitions, {batch} requested")
        idx = rng.choice(self._size, size=batch, replace=False)
        return self._gather(idx)

    def save(self, path) -> None:
        data = self.contents()
        np.savez(path, capacity=self.capacity, states=data.states if self._size else np.zeros((0, 0)),
                 actions=data.actions, rewards=data.rewards,
                 next_states=data.next_states if self._size else np.zeros((0, 0)))

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        with np.load(Path(path)) as f:
            buf = cls(int(f["capacity"]))
            for s, a, r, s2 in zip(f["states"], f["actions"], f["rewards"], f["next_states"]):
                buf.push(s, a, r, s2)
        return buf


def replay_push(buffer: ReplayBuffer, transition) -> ReplayBuffer:
    buffer.push(*transition)
    return buffer


def replay_sample(buffer: ReplayBuffer, batch: int, rng) -> Minibatch:
    return buffer.sample(batch, rng)
