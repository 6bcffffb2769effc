"""Learners restricted to a fixed offline buffer: BCQ, CQL, CRR, SQN."""

from __future__ import annotations

import numpy as np

from recrl.core import tensor as T
from recrl.core.nn import MLP
from recrl.policy.base import Policy, masked_log_probs, masked_softmax, td_loss
from recrl.policy.offpolicy import QPolicy, bootstrap_masks, require_next, td_target


class BCQ(QPolicy):
    """Discrete BCQ: Q-learning whose maximisation only considers actions the
    behaviour-cloning head finds plausible, pi_b(a|s) / max_a pi_b >= threshold."""

    kind = "bcq"
    paradigm = "batch"

    def build_heads(self, net, state_dim, rng):
        super().build_heads(net, state_dim, rng)  # q first: same init as DQN under one seed
        net.bc = MLP(state_dim, self.n_items, self.config.hidden, rng)

    def plausible(self, obs, masks: np.ndarray) -> np.ndarray:
        probs = masked_softmax(self.net.bc(self.net.state(obs)).data, masks)
        ratio = probs / probs.max(axis=-1, keepdims=True)
        return masks & (ratio >= self.config.bcq_threshold)

    def act(self, obs, masks, mode="greedy"):
        masks = np.asarray(masks, dtype=bool).reshape(len(obs), self.n_items)
        return super().act(obs, self.plausible(obs, masks), mode)

    def allowed_next(self, batch):
        return self.plausible(batch.next_obs, bootstrap_masks(batch, self.n_items))

    def loss_terms(self, batch, targets):
        state = self.net.state(batch.obs)
        logp = masked_log_probs(self.net.bc(state), batch.mask_matrix(self.n_items))
        return {
            "td": self.td_term(self.net.q(state), batch, targets),
            "bc": T.neg(T.mean(T.pick(logp, batch.actions))),
        }


class CQL(QPolicy):
    """DQN loss plus alpha * (logsumexp_a Q(s, a) - Q(s, a_data))."""

    kind = "cql"
    paradigm = "batch"

    def loss_terms(self, batch, targets):
        q = self.q_values(self.net, batch.obs)
        lse = T.logsumexp(T.masked_fill(q, batch.mask_matrix(self.n_items)), axis=-1)
        gap = T.mean(T.sub(lse, T.pick(q, batch.actions)))
        return {"td": self.td_term(q, batch, targets), "cql": T.mul(gap, self.config.cql_alpha)}


class CRR(Policy):
    """Critic-regularised regression: behaviour cloning filtered by the critic's
    advantage, with expectation-based value estimates."""

    kind = "crr"
    paradigm = "batch"
    uses_target = True

    def build_heads(self, net, state_dim, rng):
        net.actor = MLP(state_dim, self.n_items, self.config.hidden, rng)
        net.q = MLP(state_dim, self.n_items, self.config.hidden, rng)

    def scores(self, net, obs):
        return net.actor(net.state(obs))

    def _expected(self, net, obs, masks):
        state = net.state(obs)
        q = net.q(state).data
        pi = masked_softmax(net.actor(state).data, masks)
        return q, (pi * q).sum(axis=-1)

    def targets(self, batch):
        require_next(batch)
        _, v_next = self._expected(self.target, batch.next_obs, bootstrap_masks(batch, self.n_items))
        q, v = self._expected(self.net, batch.obs, batch.mask_matrix(self.n_items))
        adv = q[np.arange(len(batch)), batch.actions] - v
        if self.config.crr_transform == "binary":
            weight = (adv > 0).astype(np.float64)
        else:
            weight = np.minimum(np.exp(adv / self.config.crr_beta), 20.0)
        return {"y": td_target(batch, self.config.gamma, v_next), "weight": weight}

    def loss_terms(self, batch, targets):
        state = self.net.state(batch.obs)
        logp = masked_log_probs(self.net.actor(state), batch.mask_matrix(self.n_items))
        q_a = T.pick(self.net.q(state), batch.actions)
        return {
            "critic": td_loss(q_a, targets["y"], self.config.huber),
            "actor": T.neg(T.mean(T.mul(T.pick(logp, batch.actions), targets["weight"]))),
        }


class SQN(QPolicy):
    """Supervised next-item head plus a Q head on one shared tracker.

    Recommendations come from the supervised head."""

    kind = "sqn"
    paradigm = "batch"
    epsilon_greedy = False

    def build_heads(self, net, state_dim, rng):
        super().build_heads(net, state_dim, rng)
        net.ce = MLP(state_dim, self.n_items, self.config.hidden, rng)

    def scores(self, net, obs):
        return net.ce(net.state(obs))

    def loss_terms(self, batch, targets):
        state = self.net.state(batch.obs)
        logp = masked_log_probs(self.net.ce(state), batch.mask_matrix(self.n_items))
        return {
            "ce": T.neg(T.mean(T.pick(logp, batch.actions))),
            "td": self.td_term(self.net.q(state), batch, targets),
        }


__all__ = ["BCQ", "CQL", "CRR", "SQN"]
