"""Drive a policy through several environments and record blocks into lanes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from recrl.buffer import Block, Buffer, DEFAULT_CAPACITY
from recrl.errors import ContractViolation


@dataclass
class CollectStats:
    episodes: int = 0  # episodes that finished during this call
    steps: int = 0
    rewards: float = 0.0  # sum of every reward received during this call
    episode_returns: list[float] = field(default_factory=list)
    episode_lengths: list[int] = field(default_factory=list)


class Collector:
    """Keeps environments and per-lane bookkeeping alive between calls, so an
    episode interrupted by a step budget resumes on the next call."""

    def __init__(self, envs: Sequence, buffer: Buffer | None = None, record_masks: bool | None = None):
        if not envs:
            raise ContractViolation("collector needs at least one environment")
        self.envs = list(envs)
        n_items = self.envs[0].n_items
        self.buffer = buffer if buffer is not None else Buffer(len(self.envs), DEFAULT_CAPACITY, n_items)
        if self.buffer.n_lanes < len(self.envs):
            raise ContractViolation("buffer has fewer lanes than environments")
        if record_masks is None:
            record_masks = any(getattr(e, "remove_recommended", False) for e in self.envs)
        self.record_masks = record_masks
        self._running = [0.0] * len(self.envs)

    def collect(self, policy, n_episodes: int | None = None, n_steps: int | None = None,
                explore: bool = True, mode: str | None = None) -> CollectStats:
        """Step the environments round-robin until the target is met.

        With ``n_episodes`` no new episode starts once that many have been
        started, and the call returns when every running episode has ended.
        With ``n_steps`` the call returns after exactly that many steps.
        ``mode`` overrides the explore flag with a raw policy action mode.
        """
        if (n_episodes is None) == (n_steps is None):
            raise ContractViolation("give exactly one of n_episodes or n_steps")
        target = n_episodes if n_episodes is not None else n_steps
        if target is None or target <= 0:
            raise ContractViolation("collection target must be positive")
        if mode is None:
            mode = "explore" if explore else "greedy"
        stats = CollectStats()
        started = 0
        while True:
            if n_steps is not None and stats.steps >= n_steps:
                break
            for i, env in enumerate(self.envs):
                if env.terminated and (n_steps is not None or started < n_episodes):
                    env.reset()
                    self._running[i] = 0.0
                    started += 1
            live = [i for i, env in enumerate(self.envs) if not env.terminated]
            if not live:
                break
            obs = [self.envs[i].observation() for i in live]
            masks = np.vstack([self.envs[i].allowed_mask() for i in live])
            actions, logps = policy.act(obs, masks, mode)
            for k, i in enumerate(live):
                if n_steps is not None and stats.steps >= n_steps:
                    break
                env = self.envs[i]
                _, reward, done, _ = env.step(int(actions[k]))
                self.buffer.append(Block(
                    env_id=i, observation=obs[k], action=int(actions[k]), reward=float(reward),
                    done=bool(done), is_start=env.step_count == 1,
                    logprob=None if logps is None else float(logps[k]),
                    mask=masks[k].copy() if self.record_masks else None,
                ))
                stats.steps += 1
                stats.rewards += reward
                self._running[i] += reward
                if done:
                    stats.episodes += 1
                    stats.episode_returns.append(self._running[i])
                    stats.episode_lengths.append(env.step_count)
        return stats


def collect(policy, envs: Sequence, buffer: Buffer | None = None, n_episodes: int | None = None,
            n_steps: int | None = None, explore: bool = True) -> CollectStats:
    """One-shot collection; see :meth:`Collector.collect`."""
    return Collector(envs, buffer).collect(policy, n_episodes=n_episodes, n_steps=n_steps, explore=explore)
