"""Policy-gradient family trained on fresh trajectories: PG, A2C, PPO."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from recrl.core import tensor as T
from recrl.core.nn import MLP
from recrl.env.environment import Observation
from recrl.errors import ContractViolation
from recrl.policy.base import Policy, TransitionBatch, discounted_returns, entropy, masked_log_probs


@dataclass
class Trajectory:
    """One complete episode as seen by the learner."""

    obs: list[Observation]
    actions: np.ndarray
    rewards: np.ndarray
    masks: np.ndarray | None = None  # (T, n_items) allowed sets, None = all allowed
    logprobs: np.ndarray | None = None  # behaviour log-probabilities

    def __len__(self) -> int:
        return len(self.actions)


def batch_from_trajectories(trajs: Sequence[Trajectory], gamma: float, n_items: int) -> TransitionBatch:
    """Flatten episodes into transitions with per-step discounted returns.

    Each episode's last step is terminal; its ``next_obs`` repeats the final
    observation and is never bootstrapped from.
    """
    if not trajs:
        raise ContractViolation("no trajectories to learn from")
    obs, next_obs, acts, rews, dones, masks, next_masks, logps, rets = [], [], [], [], [], [], [], [], []
    for tr in trajs:
        n = len(tr)
        if n == 0:
            raise ContractViolation("zero-length trajectory")
        m = np.ones((n, n_items), dtype=bool) if tr.masks is None else np.asarray(tr.masks, dtype=bool)
        obs.extend(tr.obs)
        next_obs.extend(tr.obs[1:] + [tr.obs[-1]])
        acts.append(tr.actions)
        rews.append(tr.rewards)
        d = np.zeros(n, dtype=bool)
        d[-1] = True
        dones.append(d)
        masks.append(m)
        next_masks.append(np.vstack([m[1:], np.ones((1, n_items), dtype=bool)]))
        logps.append(np.full(n, np.nan) if tr.logprobs is None else np.asarray(tr.logprobs, dtype=np.float64))
        rets.append(discounted_returns(np.asarray(tr.rewards, dtype=np.float64), gamma))
    logps = np.concatenate(logps)
    return TransitionBatch(
        obs=obs, actions=np.concatenate(acts), rewards=np.concatenate(rews), dones=np.concatenate(dones),
        next_obs=next_obs, masks=np.vstack(masks), next_masks=np.vstack(next_masks),
        logprobs=None if np.isnan(logps).any() else logps, returns=np.concatenate(rets),
    )


def _normalize(x: np.ndarray) -> np.ndarray:
    if len(x) < 2:
        return x
    return (x - x.mean()) / (x.std() + 1e-8)


class OnPolicy(Policy):
    paradigm = "on"

    def build_heads(self, net, state_dim, rng):
        net.actor = MLP(state_dim, self.n_items, self.config.hidden, rng)

    def scores(self, net, obs):
        return net.actor(net.state(obs))

    def update_onpolicy(self, trajs: Sequence[Trajectory]) -> dict[str, float]:
        return self.update(batch_from_trajectories(trajs, self.config.gamma, self.n_items))


class PG(OnPolicy):
    """REINFORCE with the batch-mean return as baseline."""

    kind = "pg"

    def targets(self, batch):
        if batch.returns is None:
            raise ContractViolation("PG needs per-step returns in the batch")
        return {"adv": batch.returns - batch.returns.mean()}

    def loss_terms(self, batch, targets):
        logp = masked_log_probs(self.scores(self.net, batch.obs), batch.mask_matrix(self.n_items))
        return {"actor": T.neg(T.mean(T.mul(T.pick(logp, batch.actions), targets["adv"])))}


class A2C(OnPolicy):
    """Advantage actor-critic with a one-step TD advantage."""

    kind = "a2c"

    def build_heads(self, net, state_dim, rng):
        super().build_heads(net, state_dim, rng)
        net.critic = MLP(state_dim, 1, self.config.hidden, rng)

    def value(self, net, obs):
        return net.critic(net.state(obs))[:, 0]

    def targets(self, batch):
        if batch.next_obs is None:
            raise ContractViolation("actor-critic update needs next observations")
        v = self.value(self.net, batch.obs).data
        v_next = self.value(self.net, batch.next_obs).data
        y = batch.rewards + self.config.gamma * np.where(batch.dones, 0.0, v_next)
        adv = y - v
        if self.config.normalize_advantage:
            adv = _normalize(adv)
        return {"y": y, "adv": adv}

    def _actor_logp(self, batch):
        state = self.net.state(batch.obs)
        logp = masked_log_probs(self.net.actor(state), batch.mask_matrix(self.n_items))
        return state, logp

    def _critic_entropy(self, state, logp, targets):
        c = self.config
        v = self.net.critic(state)[:, 0]
        return {
            "critic": T.mul(T.mean(T.square(T.sub(v, targets["y"]))), c.value_coef),
            "entropy": T.mul(T.mean(entropy(logp)), -c.entropy_coef),
        }

    def loss_terms(self, batch, targets):
        state, logp = self._actor_logp(batch)
        terms = {"actor": T.neg(T.mean(T.mul(T.pick(logp, batch.actions), targets["adv"])))}
        terms.update(self._critic_entropy(state, logp, targets))
        return terms


class PPO(A2C):
    """Clipped-surrogate PPO; several full-batch epochs per collected batch."""

    kind = "ppo"

    def targets(self, batch):
        out = super().targets(batch)
        if batch.logprobs is not None:
            out["old_logp"] = np.asarray(batch.logprobs, dtype=np.float64)
        else:
            _, logp = self._actor_logp(batch)
            out["old_logp"] = logp.data[np.arange(len(batch)), batch.actions]
        return out

    def loss_terms(self, batch, targets):
        c = self.config
        state, logp = self._actor_logp(batch)
        ratio = T.exp(T.sub(T.pick(logp, batch.actions), targets["old_logp"]))
        adv = targets["adv"]
        surrogate = T.minimum(T.mul(ratio, adv), T.mul(T.clip(ratio, 1.0 - c.ppo_clip, 1.0 + c.ppo_clip), adv))
        terms = {"actor": T.neg(T.mean(surrogate))}
        terms.update(self._critic_entropy(state, logp, targets))
        return terms

    def update(self, batch):
        self.check_batch(batch)
        targets = self.targets(batch)
        sums: dict[str, float] = {}
        for _ in range(self.config.ppo_epochs):
            for k, v in self._gradient_step(batch, targets).items():
                sums[k] = sums.get(k, 0.0) + v
        return {k: v / self.config.ppo_epochs for k, v in sums.items()}
