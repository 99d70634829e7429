"""Stateless epsilon-greedy bandit with sample-average action values."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..exceptions import ActionOutOfRange, InvalidInput


def greedy_action(values) -> int:
    """Index of the largest value, ties broken towards the lowest index."""
    return int(np.argmax(np.asarray(values)))


class BanditAgent:
    """One arm per grid cell; ``q`` holds the running mean reward of each arm."""

    kind = "bandit"

    def __init__(self, n_actions: int, epsilon=0.35, q_init=0.0):
        if n_actions < 1:
            raise InvalidInput("need at least one action")
        if not 0.0 <= epsilon <= 1.0:
            raise InvalidInput("epsilon must lie in [0, 1]")
        self.n_actions = int(n_actions)
        self.epsilon = float(epsilon)
        self.q_init = float(q_init)
        self.q = np.full(self.n_actions, self.q_init)
        self.n = np.zeros(self.n_actions, dtype=np.int64)

    def select(self, rng, state=None, step=None) -> int:
        # one uniform draw decides explore/exploit, a second picks the random arm
        if rng.random() < self.epsilon:
            return int(rng.integers(self.n_actions))
        return greedy_action(self.q)

    def update(self, action, reward) -> "BanditAgent":
        if not 0 <= int(action) < self.n_actions:
            raise ActionOutOfRange(f"action {action} outside [0, {self.n_actions})")
        a = int(action)
        self.n[a] += 1
        self.q[a] += (float(reward) - self.q[a]) / self.n[a]
        return self

    def observe(self, state, action, reward, next_state, rng=None):
        self.update(action, reward)

    def reward_map(self) -> np.ndarray:
        return self.q.copy()

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "q_table.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["action", "q", "n"])
            for a in range(self.n_actions):
                writer.writerow([a, repr(float(self.q[a])), int(self.n[a])])

    def load(self, directory) -> "BanditAgent":
        with open(Path(directory) / "q_table.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        if len(rows) != self.n_actions:
            raise InvalidInput(f"checkpoint has {len(rows)} actions, agent has {self.n_actions}")
        for row in rows:
            a = int(row["action"])
            self.q[a] = float(row["q"])
            self.n[a] = int(row["n"])
        return self


def bandit_select(agent: BanditAgent, rng) -> int:
    return agent.select(rng)


def bandit_update(agent: BanditAgent, action, reward) -> BanditAgent:
    return agent.update(action, reward)
