"""Tiny environments with known optima, sharing RecEnv's interface.

States are exposed as ``Observation(user_id=state, history=())`` so any tracker
that embeds the user id becomes a lookup table over states.
"""

from __future__ import annotations

import numpy as np

from recrl.env.environment import Observation
from recrl.errors import ConfigError, ContractViolation


class _ToyEnv:
    remove_recommended = False

    def __init__(self, n_states: int, n_actions: int, max_steps: int, seed: int = 0):
        if max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        self.n_users = n_states
        self.n_items = n_actions
        self.max_steps = max_steps
        self.state = 0
        self.steps = 0
        self.terminated = True
        self.history: list[tuple[int, float]] = []
        self.seed(seed)

    def seed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    @property
    def step_count(self) -> int:
        return self.steps

    @property
    def user_id(self) -> int:
        return self.state

    def observation(self) -> Observation:
        return Observation(self.state, ())

    def allowed_mask(self) -> np.ndarray:
        return np.ones(self.n_items, dtype=bool)

    def reset(self, user_id: int | None = None) -> Observation:
        self.state = 0
        self.steps = 0
        self.terminated = False
        self.history = []
        return self.observation()

    def _check(self, action: int) -> int:
        if self.terminated:
            raise ContractViolation("step() after the episode terminated; call reset()")
        action = int(action)
        if not 0 <= action < self.n_items:
            raise ContractViolation(f"action {action} out of range")
        return action


class ChainEnv(_ToyEnv):
    """Deterministic chain: action 1 moves right, action 0 moves left (floored at 0).

    Moving right from the last non-terminal state pays 1 and ends the episode;
    every other transition pays 0. With ``n_states`` = 5 the four non-terminal
    states are 0..3 and the optimal discounted return from state 0 is gamma**3.
    """

    LEFT, RIGHT = 0, 1

    def __init__(self, n_states: int = 5, max_steps: int = 20, seed: int = 0):
        if n_states < 2:
            raise ConfigError("chain needs at least 2 states")
        super().__init__(n_states, 2, max_steps, seed)
        self.terminal = n_states - 1

    def step(self, action: int):
        action = self._check(action)
        nxt = self.state + 1 if action == self.RIGHT else max(self.state - 1, 0)
        reward = 1.0 if nxt == self.terminal else 0.0
        self.steps += 1
        self.history.append((action, reward))
        done = nxt == self.terminal
        if not done:
            self.state = nxt
        self.terminated = done or self.steps >= self.max_steps
        return self.observation(), reward, self.terminated, {"quit": False, "exhausted": False}


class BanditEnv(_ToyEnv):
    """Single-step episodes; arm ``a`` pays ``rewards[a]`` deterministically."""

    def __init__(self, rewards=(1.0, 0.0), seed: int = 0):
        self.rewards = np.asarray(rewards, dtype=np.float64)
        super().__init__(1, len(self.rewards), 1, seed)

    def step(self, action: int):
        action = self._check(action)
        reward = float(self.rewards[action])
        self.steps += 1
        self.history.append((action, reward))
        self.terminated = True
        return self.observation(), reward, True, {"quit": False, "exhausted": False}
