"""Single-step toy environments sharing the multi-agent step/reset interface."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ToyResult:
    observations: dict
    rewards: dict
    done: bool
    info: dict


class QuadraticToyEnv:
    """Each agent sees a fixed observation and earns -(action - target)^2.

    Every episode is one step long, so the optimal deterministic action is
    ``target`` for every agent.
    """

    def __init__(self, n_agents: int = 1, target: float = 0.5, obs_dim: int = 2, obs=None):
        self.agents = list(range(n_agents))
        self.action_dims = {a: 1 for a in self.agents}
        self.target = target
        base = np.linspace(-0.5, 0.5, obs_dim) if obs is None else np.asarray(obs, dtype=float)
        self._obs = {a: base.copy() for a in self.agents}

    def reset(self) -> dict:
        return {a: o.copy() for a, o in self._obs.items()}

    def reward(self, action: float) -> float:
        return -(float(action) - self.target) ** 2

    def step(self, actions: dict) -> ToyResult:
        rewards = {a: self.reward(np.asarray(actions[a]).reshape(-1)[0]) for a in self.agents}
        return ToyResult(self.reset(), rewards, True, {})


class ConstantRewardEnv(QuadraticToyEnv):
    """Reward 1 regardless of action; observations drawn from a small fixed set."""

    def __init__(self, n_agents: int = 1, obs_dim: int = 2, n_states: int = 4, seed: int = 0):
        super().__init__(n_agents, 0.0, obs_dim)
        self.states = np.random.default_rng(seed).uniform(-1, 1, (n_states, obs_dim))
        self._k = 0

    def reset(self) -> dict:
        self._state = self.states[self._k % len(self.states)]
        self._k += 1
        return {a: self._state.copy() for a in self.agents}

    def step(self, actions: dict) -> ToyResult:
        return ToyResult({a: self._state.copy() for a in self.agents}, {a: 1.0 for a in self.agents}, True, {})
