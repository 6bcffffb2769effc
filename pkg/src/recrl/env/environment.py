"""Gym-style recommendation environment built from a log and a reward model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from recrl.env.reward_model import RewardModel
from recrl.errors import ConfigError, ContractViolation


class Observation(NamedTuple):
    """What a policy sees: the user and this episode's (item, reward) history."""

    user_id: int
    history: tuple[tuple[int, float], ...] = ()


@dataclass(frozen=True)
class QuitRule:
    """User boredom: quit when the newest item's category already filled
    ``threshold`` of the ``window`` items shown just before it, or when the
    newest reward falls below ``min_reward``."""

    window: int = 4
    threshold: int = 2
    min_reward: float | None = None
    use_categories: bool = True

    def __post_init__(self):
        if self.window < 1 or self.threshold < 1:
            raise ConfigError("quit window and threshold must be positive")
        if self.threshold > self.window:
            raise ConfigError("quit threshold cannot exceed the window")


def quit_triggered(history: Sequence[tuple[int, float]], rule: QuitRule | None, category: np.ndarray | None) -> bool:
    if rule is None or not history:
        return False
    item, reward = history[-1]
    if rule.min_reward is not None and reward < rule.min_reward:
        return True
    if not rule.use_categories or category is None:
        return False
    newest = category[item]
    window = history[-1 - rule.window : -1]
    same = sum(1 for i, _ in window if category[i] == newest)
    return same >= rule.threshold


class RecEnv:
    """One simulated user session.

    Rewards come from ``truth`` (a ``(user, item) -> reward`` map) when the pair
    was logged, otherwise from ``model``. With ``remove_recommended`` the
    episode refuses repeated items and ends once the catalog is exhausted.
    """

    def __init__(
        self,
        model: RewardModel | None,
        n_items: int,
        category: np.ndarray | None = None,
        quit_rule: QuitRule | None = QuitRule(),
        remove_recommended: bool = False,
        max_steps: int = 30,
        truth: dict[tuple[int, int], float] | None = None,
        users: Sequence[int] | None = None,
        n_users: int | None = None,
        seed: int = 0,
    ):
        if model is None and truth is None:
            raise ConfigError("environment needs a reward model or a ground-truth log")
        if max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        self.model = model
        self.n_items = n_items
        self.category = None if category is None else np.asarray(category)
        self.quit_rule = quit_rule
        self.remove_recommended = remove_recommended
        self.max_steps = max_steps
        self.truth = truth or {}
        self.n_users = n_users if n_users is not None else (model.n_users if model is not None else 1 + max(u for u, _ in self.truth))
        self.users = np.arange(self.n_users) if users is None else np.asarray(users, dtype=np.int64)
        self.seed(seed)
        self.user_id: int | None = None
        self.history: list[tuple[int, float]] = []
        self.recommended: set[int] = set()
        self.terminated = True
        self._pred_cache: dict[int, np.ndarray] = {}

    def seed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    @property
    def step_count(self) -> int:
        return len(self.history)

    def observation(self) -> Observation:
        return Observation(self.user_id, tuple(self.history))

    def reset(self, user_id: int | None = None) -> Observation:
        if user_id is None:
            user_id = int(self.users[self.rng.integers(len(self.users))])
        elif not 0 <= user_id < self.n_users:
            raise ContractViolation(f"unknown user {user_id}")
        self.user_id = int(user_id)
        self.history = []
        self.recommended = set()
        self.terminated = False
        return self.observation()

    def allowed_mask(self) -> np.ndarray:
        mask = np.ones(self.n_items, dtype=bool)
        if self.remove_recommended and self.recommended:
            mask[list(self.recommended)] = False
        return mask

    def reward_of(self, user: int, item: int) -> float:
        r = self.truth.get((user, item))
        if r is not None:
            return r
        if self.model is None:
            raise ContractViolation(f"pair ({user}, {item}) not logged and no reward model configured")
        preds = self._pred_cache.get(user)
        if preds is None:
            preds = self._pred_cache[user] = self.model.predict_user(user)
        return float(preds[item])

    def step(self, action: int):
        if self.terminated:
            raise ContractViolation("step() after the episode terminated; call reset()")
        action = int(action)
        if not 0 <= action < self.n_items:
            raise ContractViolation(f"item {action} out of range")
        if self.remove_recommended and action in self.recommended:
            raise ContractViolation(f"item {action} was already recommended this episode")
        reward = self.reward_of(self.user_id, action)
        self.history.append((action, reward))
        self.recommended.add(action)
        quit_ = quit_triggered(self.history, self.quit_rule, self.category)
        exhausted = self.remove_recommended and len(self.recommended) >= self.n_items
        self.terminated = quit_ or exhausted or self.step_count >= self.max_steps
        info = {"quit": quit_, "exhausted": exhausted}
        return self.observation(), reward, self.terminated, info
