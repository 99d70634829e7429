"""Sampling agents: epsilon-greedy bandit, DQN and PPO.

All agents share ``select(rng, state, step)`` and
``observe(state, action, reward, next_state, rng)`` plus ``save``/``load``
of a checkpoint directory.
"""
from .bandit import BanditAgent, bandit_select, bandit_update, greedy_action
from .dqn import DqnAgent, DqnConfig, dqn_select, dqn_update
from .ppo import PpoAgent, PpoConfig, gae, ppo_objective, ppo_update
from .replay import Minibatch, ReplayBuffer, replay_push, replay_sample

AGENT_KINDS = ("bandit", "dqn", "ppo")


def make_agent(kind, state_dim, n_actions, seed=0, epsilon=0.35, q_init=0.0, params=None):
    params = dict(params or {})
    if kind == "bandit":
        return BanditAgent(n_actions, epsilon=epsilon, q_init=q_init)
    if kind == "dqn":
        return DqnAgent(state_dim, n_actions, DqnConfig(**params), seed=seed)
    if kind == "ppo":
        return PpoAgent(state_dim, n_actions, PpoConfig(**params), seed=seed)
    raise ValueError(f"unknown agent kind {kind!r}; choose from {AGENT_KINDS}")


__all__ = [
    "AGENT_KINDS", "BanditAgent", "DqnAgent", "DqnConfig", "Minibatch", "PpoAgent", "PpoConfig",
    "ReplayBuffer", "bandit_select", "bandit_update", "dqn_select", "dqn_update", "gae", "greedy_action",
    "make_agent", "ppo_objective", "ppo_update", "replay_push", "replay_sample",
]
