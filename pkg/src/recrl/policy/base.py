"""Shared policy machinery: configuration, transition batches, action selection.

Every policy splits its update into two stages:

* ``targets(batch)`` computes everything that must be treated as a constant
  (bootstrap values, advantages, old log-probabilities) as plain arrays;
* ``loss_terms(batch, targets)`` builds the differentiable losses.

Keeping the constants out of the loss makes each loss a deterministic function
of the live parameters, which is what finite-difference checks need.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from recrl.core import tensor as T
from recrl.core.nn import Module
from recrl.core.optim import Optimizer, make_optimizer
from recrl.core.tensor import Tape, Tensor, backward
from recrl.env.environment import Observation
from recrl.errors import ConfigError, ContractViolation
from recrl.tracker import StateTracker, TrackerConfig, build_tracker

POLICY_KINDS = ("pg", "a2c", "ppo", "dqn", "ddpg", "bcq", "cql", "crr", "sqn")
ON_POLICY = ("pg", "a2c", "ppo")
OFF_POLICY = ("dqn", "ddpg")
BATCH_RL = ("bcq", "cql", "crr", "sqn")


@dataclass
class PolicyConfig:
    kind: str = "a2c"
    gamma: float = 0.9
    lr: float = 1e-3
    optimizer: str = "adam"
    hidden: int = 0  # hidden units in each head; 0 means a single linear layer
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.5  # share of training over which epsilon decays
    ppo_clip: float = 0.2
    ppo_epochs: int = 4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    normalize_advantage: bool = True
    huber: bool = True
    target_update: int = 50  # hard target sync period, in updates
    tau_soft: float = 0.005
    explore_noise: float = 0.1  # DDPG Gaussian exploration std
    bcq_threshold: float = 0.3
    cql_alpha: float = 1.0
    crr_beta: float = 1.0
    crr_transform: str = "binary"
    seed: int = 2023

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy kind {self.kind!r}; expected one of {POLICY_KINDS}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.eps_end <= self.eps_start <= 1.0:
            raise ConfigError("epsilon schedule needs 0 <= eps_end <= eps_start <= 1")
        if not 0.0 < self.eps_fraction <= 1.0:
            raise ConfigError("eps_fraction must lie in (0, 1]")
        if not 0.0 < self.ppo_clip < 1.0:
            raise ConfigError("ppo_clip must lie in (0, 1)")
        if self.ppo_epochs < 1 or self.target_update < 1:
            raise ConfigError("ppo_epochs and target_update must be >= 1")
        if not 0.0 < self.tau_soft <= 1.0:
            raise ConfigError("tau_soft must lie in (0, 1]")
        if not 0.0 <= self.bcq_threshold <= 1.0:
            raise ConfigError("bcq_threshold must lie in [0, 1]")
        if self.crr_transform not in ("binary", "exp"):
            raise ConfigError("crr_transform must be 'binary' or 'exp'")
        if self.explore_noise < 0 or self.cql_alpha < 0 or self.crr_beta <= 0:
            raise ConfigError("explore_noise and cql_alpha must be >= 0, crr_beta > 0")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TransitionBatch:
    """Aligned arrays of (s, a, r, s', done) plus optional on-policy extras.

    ``masks[i]`` is the allowed-item set at ``obs[i]`` and ``next_masks[i]`` the
    one at ``next_obs[i]``. Rows with ``dones[i]`` never bootstrap.
    """

    obs: list[Observation]
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    next_obs: list[Observation] | None = None
    masks: np.ndarray | None = None
    next_masks: np.ndarray | None = None
    logprobs: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.dones = np.asarray(self.dones, dtype=bool)
        n = len(self.obs)
        if n == 0:
            raise ContractViolation("empty transition batch")
        arrays = {"actions": self.actions, "rewards": self.rewards, "dones": self.dones,
                  "masks": self.masks, "next_masks": self.next_masks,
                  "logprobs": self.logprobs, "returns": self.returns}
        for name, arr in arrays.items():
            if arr is not None and len(arr) != n:
                raise ContractViolation(f"batch field {name} has length {len(arr)}, expected {n}")
        if self.next_obs is not None and len(self.next_obs) != n:
            raise ContractViolation("next_obs length differs from obs")

    def __len__(self) -> int:
        return len(self.obs)

    def mask_matrix(self, n_items: int, which: str = "masks") -> np.ndarray:
        m = getattr(self, which)
        if m is None:
            return np.ones((len(self), n_items), dtype=bool)
        return np.asarray(m, dtype=bool)


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """G_t = sum_k gamma^k r_{t+k}, by a single reverse pass."""
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


# ---------------------------------------------------------------------------
# action selection on raw scores


def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ContractViolation("action mask allows no item")
    return mask


def masked_argmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise argmax over allowed entries; ties go to the lowest index."""
    mask = _check_mask(mask)
    return np.where(mask, scores, -np.inf).argmax(axis=-1)


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = _check_mask(mask)
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw of one index per row."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    idx = (cdf <= u).sum(axis=-1)
    # guard against round-off landing on a zero-probability tail entry
    idx = np.minimum(idx, probs.shape[1] - 1)
    bad = probs[np.arange(len(idx)), idx] == 0
    if bad.any():
        idx[bad] = probs[bad].argmax(axis=-1)
    return idx


def select_from_scores(scores, mask, mode: str = "greedy", rng: np.random.Generator | None = None,
                       epsilon: float | None = None) -> int:
    """Pick one item from a score vector.

    greedy: masked argmax. explore: epsilon-greedy over allowed items when
    ``epsilon`` is given, otherwise a draw from the masked softmax.
    """
    scores = np.asarray(scores, dtype=np.float64)[None, :]
    mask = np.asarray(mask, dtype=bool)[None, :]
    return int(_select(scores, mask, mode, rng, epsilon)[0])


def _select(scores, mask, mode, rng, epsilon):
    mask = _check_mask(mask)
    if mode == "greedy":
        return masked_argmax(scores, mask)
    if mode != "explore":
        raise ContractViolation(f"unknown selection mode {mode!r}")
    if rng is None:
        raise ContractViolation("explore mode needs a random generator")
    if epsilon is None:
        return sample_rows(masked_softmax(scores, mask), rng)
    out = masked_argmax(scores, mask)
    rand = rng.random(len(out)) < epsilon
    for b in np.flatnonzero(rand):
        allowed = np.flatnonzero(mask[b])
        out[b] = allowed[rng.integers(len(allowed))]
    return out


def map_continuous_action(proto, item_embeddings, mask) -> int:
    """Allowed item whose embedding has the largest dot product with ``proto``."""
    proto = np.asarray(proto, dtype=np.float64)
    if not np.all(np.isfinite(proto)):
        raise ContractViolation("proto-action must be finite")
    return int(map_continuous_batch(proto[None, :], item_embeddings, np.asarray(mask)[None, :])[0])


def map_continuous_batch(protos: np.ndarray, item_embeddings: np.ndarray, masks: np.ndarray) -> np.ndarray:
    return masked_argmax(protos @ np.asarray(item_embeddings).T, masks)


# ---------------------------------------------------------------------------


def masked_log_probs(logits: Tensor, mask: np.ndarray) -> Tensor:
    return T.log_softmax(T.masked_fill(logits, mask), axis=-1)


def entropy(logp: Tensor) -> Tensor:
    """Per-row entropy from log-probabilities (masked rows contribute 0)."""
    return T.neg(T.sum_(T.mul(T.exp(logp), logp), axis=-1))


def td_loss(pred: Tensor, target: np.ndarray, huber: bool) -> Tensor:
    err = T.sub(pred, target)
    return T.mean(T.huber(err)) if huber else T.mean(T.square(err))


class Net(Module):
    """A state tracker plus named heads; the unit that target copies duplicate."""

    def __init__(self, tracker: StateTracker):
        super().__init__()
        self.tracker = tracker

    def state(self, obs: Sequence[Observation]) -> Tensor:
        return self.tracker.encode_batch(obs)


class Policy(Module):
    """Base class. Subclasses define the heads, ``scores`` and the losses."""

    kind = "base"
    paradigm = "none"  # "on", "off" or "batch"
    uses_target = False
    epsilon_greedy = False  # explore with epsilon-greedy instead of sampling

    def __init__(self, config: PolicyConfig, tracker_config: TrackerConfig, n_users: int, n_items: int):
        super().__init__()
        if config.kind != self.kind:
            raise ConfigError(f"config kind {config.kind!r} given to {type(self).__name__}")
        self.config = config
        self.tracker_config = tracker_config
        self.n_users, self.n_items = n_users, n_items
        self.rng = np.random.default_rng(config.seed)
        init_rng = np.random.default_rng(config.seed + 7)
        self.net = Net(build_tracker(tracker_config, n_users, n_items, init_rng))
        self.build_heads(self.net, self.net.tracker.output_dim, init_rng)
        if self.uses_target:
            self.target = copy.deepcopy(self.net)
        self.optimizers = self.make_optimizers()
        self.epsilon = config.eps_start
        self.n_updates = 0

    # -- construction -----------------------------------------------------
    def build_heads(self, net: Net, state_dim: int, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def make_optimizers(self) -> list[tuple[tuple[str, ...], Optimizer]]:
        """(loss-term names, optimizer) pairs; default: one optimizer over the live net."""
        return [((), make_optimizer(self.config.optimizer, self.net.parameters(), self.config.lr))]

    # -- acting -----------------------------------------------------------
    def scores(self, net: Net, obs: Sequence[Observation]) -> Tensor:
        """Per-item scores (logits or Q-values) used for acting, shape (B, n_items)."""
        raise NotImplementedError

    def set_progress(self, fraction: float) -> None:
        """Advance the epsilon schedule; ``fraction`` is the share of training done."""
        c = self.config
        frac = min(max(fraction, 0.0) / c.eps_fraction, 1.0)
        self.epsilon = c.eps_start + frac * (c.eps_end - c.eps_start)

    def act(self, obs: Sequence[Observation], masks: np.ndarray, mode: str = "greedy"):
        """Choose one item per observation. Returns (items, behaviour log-probs or None).

        ``mode`` is "greedy", "explore" (sampling or epsilon-greedy) or
        "policy" (sampling for softmax actors, greedy for value-based kinds).
        """
        masks = _check_mask(np.asarray(masks, dtype=bool).reshape(len(obs), self.n_items))
        s = self.scores(self.net, obs).data
        if mode == "policy":
            # the policy's own behaviour without exploration extras:
            # softmax actors sample, value-based kinds act greedily
            mode = "greedy" if self.epsilon_greedy else "explore"
        if self.epsilon_greedy:
            return _select(s, masks, mode, self.rng, self.epsilon), None
        items = _select(s, masks, mode, self.rng, None)
        logp = np.log(np.maximum(masked_softmax(s, masks)[np.arange(len(items)), items], 1e-300))
        return items, logp

    def select_action(self, obs: Observation, mask=None, mode: str = "greedy") -> int:
        if mask is None:
            mask = np.ones(self.n_items, dtype=bool)
        return int(self.act([obs], np.asarray(mask)[None, :], mode)[0][0])

    # -- learning ---------------------------------------------------------
    def check_batch(self, batch: TransitionBatch) -> None:
        if batch.actions.min() < 0 or batch.actions.max() >= self.n_items:
            raise ContractViolation("batch action out of range")
        masks = batch.mask_matrix(self.n_items)
        if not masks[np.arange(len(batch)), batch.actions].all():
            raise ContractViolation("batch contains an action outside its mask")

    def targets(self, batch: TransitionBatch) -> dict[str, np.ndarray]:
        return {}

    def loss_terms(self, batch: TransitionBatch, targets: dict[str, np.ndarray]) -> dict[str, Tensor]:
        raise NotImplementedError

    def update(self, batch: TransitionBatch) -> dict[str, float]:
        self.check_batch(batch)
        return self._gradient_step(batch, self.targets(batch))

    def _gradient_step(self, batch, targets) -> dict[str, float]:
        with Tape() as tape:
            terms = self.loss_terms(batch, targets)
            group_losses = [_sum_terms([terms[n] for n in names] if names else list(terms.values()))
                            for names, _ in self.optimizers]
        # all gradients first, then all steps: VJPs read parameter data lazily
        grads = []
        for loss, (_, opt) in zip(group_losses, self.optimizers):
            backward(tape, loss, opt.params)
            grads.append([p.grad for p in opt.params])
        for g, (_, opt) in zip(grads, self.optimizers):
            for p, gi in zip(opt.params, g):
                p.grad = gi
            opt.step()
        self.n_updates += 1
        self.after_update()
        return {k: v.item() for k, v in terms.items()}

    def after_update(self) -> None:
        if self.uses_target and self.n_updates % self.config.target_update == 0:
            self.sync_target()

    def sync_target(self) -> None:
        self.target.copy_from(self.net)


def _sum_terms(terms: Sequence[Tensor]) -> Tensor:
    loss = terms[0]
    for t in terms[1:]:
        loss = T.add(loss, t)
    return loss


def one_hot_mask(n_items: int, allowed: Sequence[int]) -> np.ndarray:
    m = np.zeros(n_items, dtype=bool)
    m[list(allowed)] = True
    return m


__all__ = [
    "POLICY_KINDS", "ON_POLICY", "OFF_POLICY", "BATCH_RL", "PolicyConfig", "TransitionBatch",
    "Policy", "Net", "discounted_returns", "masked_argmax", "masked_softmax", "select_from_scores",
    "map_continuous_action", "map_continuous_batch", "masked_log_probs", "entropy", "td_loss",
    "one_hot_mask",
]


class RandomPolicy:
    """Uniform choice over allowed items; the baseline every learner should beat."""

    kind = "random"
    paradigm = "none"

    def __init__(self, n_items: int, seed: int = 0):
        self.n_items = n_items
        self.rng = np.random.default_rng(seed)

    def set_progress(self, fraction: float) -> None:
        pass

    def act(self, obs, masks, mode: str = "greedy"):
        masks = _check_mask(np.asarray(masks, dtype=bool).reshape(len(obs), self.n_items))
        return _select(np.zeros(masks.shape), masks, "explore", self.rng, 1.0), None

    def select_action(self, obs, mask=None, mode: str = "greedy") -> int:
        if mask is None:
            mask = np.ones(self.n_items, dtype=bool)
        return int(self.act([obs], np.asarray(mask)[None, :], mode)[0][0])
