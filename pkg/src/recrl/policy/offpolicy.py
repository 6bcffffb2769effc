"""Replay-based learners: DQN (discrete) and DDPG (continuous via item mapping)."""

from __future__ import annotations

import numpy as np

from recrl.core import tensor as T
from recrl.core.nn import MLP
from recrl.core.optim import make_optimizer
from recrl.core.tensor import Tensor
from recrl.errors import ContractViolation
from recrl.policy.base import Policy, TransitionBatch, map_continuous_batch, masked_argmax, td_loss


def require_next(batch: TransitionBatch) -> None:
    if batch.next_obs is None:
        raise ContractViolation("bootstrapped update needs next observations")


def bootstrap_masks(batch: TransitionBatch, n_items: int) -> np.ndarray:
    """Next-state masks; terminal rows get a full mask (their value is discarded anyway)."""
    m = batch.mask_matrix(n_items, "next_masks").copy()
    m[batch.dones] = True
    return m


def td_target(batch: TransitionBatch, gamma: float, next_values: np.ndarray) -> np.ndarray:
    return batch.rewards + gamma * np.where(batch.dones, 0.0, next_values)


class QPolicy(Policy):
    """Shared pieces for kinds with a per-item Q head and a hard-synced target copy."""

    uses_target = True
    epsilon_greedy = True

    def build_heads(self, net, state_dim, rng):
        net.q = MLP(state_dim, self.n_items, self.config.hidden, rng)

    def scores(self, net, obs):
        return net.q(net.state(obs))

    def q_values(self, net, obs) -> Tensor:
        return net.q(net.state(obs))

    def allowed_next(self, batch: TransitionBatch) -> np.ndarray:
        return bootstrap_masks(batch, self.n_items)

    def targets(self, batch):
        require_next(batch)
        q_next = self.q_values(self.target, batch.next_obs).data
        allowed = self.allowed_next(batch)
        best = masked_argmax(q_next, allowed)
        return {"y": td_target(batch, self.config.gamma, q_next[np.arange(len(batch)), best])}

    def td_term(self, q: Tensor, batch, targets) -> Tensor:
        return td_loss(T.pick(q, batch.actions), targets["y"], self.config.huber)


class DQN(QPolicy):
    kind = "dqn"
    paradigm = "off"

    def loss_terms(self, batch, targets):
        return {"td": self.td_term(self.q_values(self.net, batch.obs), batch, targets)}


class DDPG(Policy):
    """Deterministic actor emitting a proto-action in item-embedding space.

    The critic scores (state, item embedding) pairs. Logged actions enter the
    critic through the tracker's item embeddings, which the critic loss also
    trains; the actor is trained through the raw proto-action.
    """

    kind = "ddpg"
    paradigm = "off"
    uses_target = True

    def build_heads(self, net, state_dim, rng):
        d = self.tracker_config.embedding_dim
        net.actor = MLP(state_dim, d, self.config.hidden, rng)
        net.critic = MLP(state_dim + d, 1, self.config.hidden, rng)

    def make_optimizers(self):
        c = self.config
        critic_params = self.net.tracker.parameters() + self.net.critic.parameters()
        return [
            (("critic",), make_optimizer(c.optimizer, critic_params, c.lr)),
            (("actor",), make_optimizer(c.optimizer, self.net.actor.parameters(), c.lr)),
        ]

    def item_table(self, net) -> np.ndarray:
        return net.tracker.item_emb.table.data[: self.n_items]

    def proto(self, net, state: Tensor) -> Tensor:
        return T.tanh(net.actor(state))

    def scores(self, net, obs):
        return T.matmul(self.proto(net, net.state(obs)), self.item_table(net).T)

    def act(self, obs, masks, mode="greedy"):
        masks = np.asarray(masks, dtype=bool).reshape(len(obs), self.n_items)
        p = self.proto(self.net, self.net.state(obs)).data
        if mode == "explore" and self.config.explore_noise > 0:
            p = p + self.rng.normal(0.0, self.config.explore_noise, size=p.shape)
        elif mode not in ("explore", "greedy", "policy"):
            raise ContractViolation(f"unknown selection mode {mode!r}")
        return map_continuous_batch(p, self.item_table(self.net), masks), None

    def critic_value(self, net, state: Tensor, action_vec) -> Tensor:
        return net.critic(T.concat([state, action_vec], axis=-1))[:, 0]

    def targets(self, batch):
        require_next(batch)
        s_next = self.target.state(batch.next_obs)
        p_next = self.proto(self.target, s_next).data
        table = self.item_table(self.target)
        a_next = map_continuous_batch(p_next, table, bootstrap_masks(batch, self.n_items))
        q_next = self.critic_value(self.target, s_next, table[a_next]).data
        return {"y": td_target(batch, self.config.gamma, q_next)}

    def loss_terms(self, batch, targets):
        state = self.net.state(batch.obs)
        q = self.critic_value(self.net, state, T.gather_rows(self.net.tracker.item_emb.table, batch.actions))
        fixed_state = Tensor(state.data)
        q_actor = self.critic_value(self.net, fixed_state, self.proto(self.net, fixed_state))
        return {"critic": td_loss(q, targets["y"], self.config.huber), "actor": T.neg(T.mean(q_actor))}

    def after_update(self):
        self.target.soft_update(self.net, self.config.tau_soft)
