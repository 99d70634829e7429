"""Proximal policy optimisation over a discrete action set.

The actor outputs logits of a categorical policy, the critic a scalar state
value.  Rollouts of ``batch_size`` transitions are scored with generalised
advantage estimation and then used for ``epochs`` passes of minibatch
updates on the clipped surrogate and the critic MSE.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, softmax

from ..exceptions import InvalidInput, ShapeMismatch
from ..neural import Mlp, OptimizerState, clip_gradients, mse_loss, optimizer_step


@dataclass
class PpoConfig:
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    batch_size: int = 64
    minibatch_size: int = 16
    learning_rate: float = 3e-4
    critic_learning_rate: float = 3e-4
    grad_clip: float = 100.0
    normalize_advantages: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.clip_eps < 1.0:
            raise InvalidInput("clip_eps must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.minibatch_size < 1:
            raise InvalidInput("epochs must be >= 0 and batch sizes positive")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise InvalidInput("gamma and gae_lambda must lie in [0, 1]")


def gae(rewards, values, gamma, lam) -> np.ndarray:
    """Advantages ``A_t = sum_l (gamma lam)^l delta_{t+l}`` via the backward recursion.

    ``values`` has one more entry than ``rewards``: the bootstrap value of the
    state after the last transition.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.shape != (rewards.size + 1,):
        raise ShapeMismatch("values must have length len(rewards) + 1")
    delta = rewards + gamma * values[1:] - values[:-1]
    adv = np.zeros_like(delta)
    running = 0.0
    for t in range(delta.size - 1, -1, -1):
        running = delta[t] + gamma * lam * running
        adv[t] = running
    return adv


def ppo_objective(old_logprobs, new_logprobs, advantages, clip_eps):
    """Negated clipped surrogate and its gradient with respect to ``new_logprobs``.

    Samples whose ratio is clipped on the side the advantage pushes towards
    contribute a constant and therefore a zero gradient.
    """
    old = np.asarray(old_logprobs, dtype=float)
    new = np.asarray(new_logprobs, dtype=float)
    adv = np.asarray(advantages, dtype=float)
    if not old.shape == new.shape == adv.shape:
        raise ShapeMismatch("old/new log-probabilities and advantages must have equal length")
    ratio = np.exp(new - old)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    surrogate = np.minimum(ratio * adv, clipped * adv)
    # the unclipped branch is active exactly when it attains the minimum strictly inside
    # the trust region or on the side that makes the objective worse
    active = np.where(adv > 0, ratio < 1.0 + clip_eps, np.where(adv < 0, ratio > 1.0 - clip_eps, False))
    n = max(adv.size, 1)
    grad = -np.where(active, ratio * adv, 0.0) / n
    return float(-surrogate.sum() / n), grad


class PpoAgent:
    kind = "ppo"

    def __init__(self, state_dim: int, n_actions: int, config: PpoConfig | None = None, seed=0):
        self.config = config or PpoConfig()
        self.state_dim = int(state_dim)
        self.n_actions = int(n_actions)
        rng = np.random.default_rng(seed)
        c = self.config
        self.actor = Mlp([self.state_dim, *c.hidden, self.n_actions], c.activation, rng=rng)
        self.critic = Mlp([self.state_dim, *c.hidden, 1], c.activation, rng=rng)
        self.actor_opt = OptimizerState("adam", learning_rate=c.learning_rate)
        self.critic_opt = OptimizerState("adam", learning_rate=c.critic_learning_rate)
        self._clear()
        self.n_updates = 0

    def _clear(self):
        self.buffer = {"states": [], "actions": [], "logprobs": [], "rewards": [], "values": [], "next_states": []}

    def _states(self, state) -> np.ndarray:
        return np.asarray(state, dtype=float).reshape(-1, self.state_dim)

    def probabilities(self, state) -> np.ndarray:
        return softmax(self.actor.forward(self._states(state)), axis=1)

    def log_probabilities(self, state) -> np.ndarray:
        return log_softmax(self.actor.forward(self._states(state)), axis=1)

    def value(self, state) -> np.ndarray:
        return self.critic.forward(self._states(state))[:, 0]

    def select(self, rng, state=None, step=None) -> int:
        p = self.probabilities(state)[0]
        return int(rng.choice(self.n_actions, p=p))

    def observe(self, state, action, reward, next_state, rng=None):
        """Store a transition; run an update once ``batch_size`` transitions are held."""
        if not 0 <= int(action) < self.n_actions:
            raise InvalidInput(f"action {action} out of range")
        b = self.buffer
        b["states"].append(np.asarray(state, dtype=float).ravel())
        b["actions"].append(int(action))
        b["logprobs"].append(float(self.log_probabilities(state)[0, int(action)]))
        b["rewards"].append(float(reward))
        b["values"].append(float(self.value(state)[0]))
        b["next_states"].append(np.asarray(next_state, dtype=float).ravel())
        if len(b["actions"]) < self.config.batch_size:
            return None
        batch = self.rollout_batch()
        self._clear()
        return ppo_update(self, batch, rng if rng is not None else np.random.default_rng(self.n_updates))

    def rollout_batch(self) -> dict:
        b = self.buffer
        values = np.append(b["values"], self.value(b["next_states"][-1])[0])
        adv = gae(b["rewards"], values, self.config.gamma, self.config.gae_lambda)
        return {
            "states": np.array(b["states"]),
            "actions": np.array(b["actions"], dtype=np.int64),
            "logprobs": np.array(b["logprobs"]),
            "advantages": adv,
            "returns": adv + values[:-1],
        }

    def reward_map(self, states=None):
        return None

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.actor.save(directory / "actor.json")
        self.critic.save(directory / "critic.json")
        (directory / "optimizers.json").write_text(json.dumps(
            {"actor": self.actor_opt.to_dict(), "critic": self.critic_opt.to_dict()}))
        b = self.buffer
        np.savez(directory / "rollout.npz",
                 states=np.array(b["states"]).reshape(-1, self.state_dim),
                 actions=np.array(b["actions"], dtype=np.int64), logprobs=np.array(b["logprobs"]),
                 rewards=np.array(b["rewards"]), values=np.array(b["values"]),
                 next_states=np.array(b["next_states"]).reshape(-1, self.state_dim))
        meta = {"kind": self.kind, "state_dim": self.state_dim, "n_actions": self.n_actions,
                "n_updates": self.n_updates, "hyperparameters": asdict(self.config)}
        (directory / "hyperparameters.json").write_text(json.dumps(meta, indent=2))

    def load(self, directory) -> "PpoAgent":
        directory = Path(directory)
        meta = json.loads((directory / "hyperparameters.json").read_text())
        if meta["state_dim"] != self.state_dim or meta["n_actions"] != self.n_actions:
            raise InvalidInput("checkpoint does not match agent dimensions")
        self.config = PpoConfig(**meta["hyperparameters"])
        self.actor = Mlp.load(directory / "actor.json")
        self.critic = Mlp.load(directory / "critic.json")
        opts = json.loads((directory / "optimizers.json").read_text())
        self.actor_opt = OptimizerState.from_dict(opts["actor"])
        self.critic_opt = OptimizerState.from_dict(opts["critic"])
        with np.load(directory / "rollout.npz") as f:
            self.buffer = {
                "states": list(f["states"]), "actions": [int(a) for a in f["actions"]],
                "logprobs": [float(v) for v in f["logprobs"]], "rewards": [float(v) for v in f["rewards"]],
                "values": [float(v) for v in f["values"]], "next_states": list(f["next_states"]),
            }
        self.n_updates = int(meta["n_updates"])
        return self


def ppo_update(agent: PpoAgent, batch: dict, rng) -> PpoAgent:
    """``epochs`` passes of shuffled minibatch updates of actor and critic."""
    c = agent.config
    states, actions = batch["states"], batch["actions"]
    adv = np.asarray(batch["advantages"], dtype=float)
    if c.normalize_advantages and adv.size > 1 and adv.std() > 0:
        adv = (adv - adv.mean()) / adv.std()
    n = len(actions)
    for _ in range(c.epochs):
        order = rng.permutation(n)
        for start in range(0, n, c.minibatch_size):
            idx = order[start:start + c.minibatch_size]
            rows = np.arange(idx.size)
            logits = agent.actor.forward(states[idx])
            logp = log_softmax(logits, axis=1)
            _, g_logp = ppo_objective(batch["logprobs"][idx], logp[rows, actions[idx]],
                                      adv[idx], c.clip_eps)
            # d log pi(a) / d logits = onehot(a) - softmax
            g_logits = -np.exp(logp) * g_logp[:, None]
            g_logits[rows, actions[idx]] += g_logp
            if np.any(g_logits):
                grads = clip_gradients(agent.actor.backward(g_logits), c.grad_clip)
                optimizer_step(agent.actor, grads, agent.actor_opt)
            v = agent.critic.forward(states[idx])
            _, g_v = mse_loss(v[:, 0], batch["returns"][idx])
            grads = clip_gradients(agent.critic.backward(g_v[:, None]), c.grad_clip)
            optimizer_step(agent.critic, grads, agent.critic_opt)
    agent.n_updates += 1
    return agent
