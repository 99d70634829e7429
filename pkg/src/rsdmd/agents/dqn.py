"""Deep Q-network with experience replay and a soft-updated target network."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..exceptions import InvalidInput
from ..neural import Mlp, OptimizerState, clip_gradients, huber_loss, optimizer_step, soft_update
from .bandit import greedy_action
from .replay import Minibatch, ReplayBuffer


@dataclass
class DqnConfig:
    hidden: tuple = (128, 128)
    activation: str = "relu"
    gamma: float = 0.99
    tau: float = 0.05
    learning_rate: float = 1e-3
    epsilon_start: float = 0.9
    epsilon_end: float = 0.05
    epsilon_decay: float = 1000.0
    replay_capacity: int = 20000
    batch_size: int = 64
    learning_starts: int = 200
    huber_delta: float = 1.0
    grad_clip: float = 100.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.gamma <= 1.0:
            raise InvalidInput("gamma must lie in [0, 1]")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise InvalidInput("need 0 <= epsilon_end <= epsilon_start <= 1")
        if self.epsilon_decay <= 0:
            raise InvalidInput("epsilon_decay must be positive")


class DqnAgent:
    kind = "dqn"

    def __init__(self, state_dim: int, n_actions: int, config: DqnConfig | None = None, seed=0):
        self.config = config or DqnConfig()
        self.state_dim = int(state_dim)
        self.n_actions = int(n_actions)
        sizes = [self.state_dim, *self.config.hidden, self.n_actions]
        self.policy_net = Mlp(sizes, self.config.activation, rng=np.random.default_rng(seed))
        self.target_net = self.policy_net.copy()
        self.optimizer = OptimizerState("adam", learning_rate=self.config.learning_rate)
        self.replay = ReplayBuffer(self.config.replay_capacity, self.state_dim)
        self.n_updates = 0
        self.last_loss = None

    def epsilon(self, step) -> float:
        c = self.config
        return c.epsilon_end + (c.epsilon_start - c.epsilon_end) * math.exp(-float(step) / c.epsilon_decay)

    def q_values(self, state) -> np.ndarray:
        return self.policy_net.forward(np.asarray(state, dtype=float).reshape(-1, self.state_dim))

    def select(self, rng, state=None, step=0) -> int:
        if rng.random() < self.epsilon(step):
            return int(rng.integers(self.n_actions))
        return greedy_action(self.q_values(state)[0])

    def update(self, batch: Minibatch) -> float:
        """One gradient step on the Huber TD loss followed by the soft target update."""
        c = self.config
        next_q = self.target_net.forward(batch.next_states)
        targets = batch.rewards + c.gamma * next_q.max(axis=1)
        q = self.policy_net.forward(batch.states)
        rows = np.arange(len(batch))
        loss, g_chosen = huber_loss(q[rows, batch.actions], targets, c.huber_delta)
        g = np.zeros_like(q)
        g[rows, batch.actions] = g_chosen
        grads = clip_gradients(self.policy_net.backward(g), c.grad_clip)
        optimizer_step(self.policy_net, grads, self.optimizer)
        soft_update(self.target_net, self.policy_net, c.tau)
        self.n_updates += 1
        self.last_loss = loss
        return loss

    def observe(self, state, action, reward, next_state, rng=None) -> float | None:
        self.replay.push(state, action, reward, next_state)
        c = self.config
        if len(self.replay) < max(c.learning_starts, c.batch_size) or rng is None:
            return None
        return self.update(self.replay.sample(c.batch_size, rng))

    def reward_map(self, states=None) -> np.ndarray | None:
        return None

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.policy_net.save(directory / "policy_net.json")
        self.target_net.save(directory / "target_net.json")
        (directory / "optimizer.json").write_text(json.dumps(self.optimizer.to_dict()))
        self.replay.save(directory / "replay.npz")
        meta = {"kind": self.kind, "state_dim": self.state_dim, "n_actions": self.n_actions,
                "n_updates": self.n_updates, "hyperparameters": asdict(self.config)}
        (directory / "hyperparameters.json").write_text(json.dumps(meta, indent=2))

    def load(self, directory) -> "DqnAgent":
        directory = Path(directory)
        meta = json.loads((directory / "hyperparameters.json").read_text())
        if meta["state_dim"] != self.state_dim or meta["n_actions"] != self.n_actions:
            raise InvalidInput("checkpoint does not match agent dimensions")
        self.config = DqnConfig(**meta["hyperparameters"])
        self.policy_net = Mlp.load(directory / "policy_net.json")
        self.target_net = Mlp.load(directory / "target_net.json")
        self.optimizer = OptimizerState.from_dict(json.loads((directory / "optimizer.json").read_text()))
        self.replay = ReplayBuffer.load(directory / "replay.npz")
        self.n_updates = int(meta["n_updates"])
        return self


def dqn_select(agent: DqnAgent, state, step, rng) -> int:
    return agent.select(rng, state, step)


def dqn_update(agent: DqnAgent, minibatch: Minibatch) -> DqnAgent:
    agent.update(minibatch)
    return agent
