"""Biased matrix factorization used both as the simulated user and as the
evaluation model that fills vacant (user, item) pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from recrl.core import tensor as T
from recrl.core.nn import MLP, Module, uniform_init, zeros_param
from recrl.core.optim import Adam
from recrl.core.tensor import Tape, Tensor, backward
from recrl.data.dataset import InteractionLog
from recrl.errors import ConfigError, ContractViolation, DataError


@dataclass
class MFConfig:
    epochs: int = 200
    lr: float = 0.01
    batch_size: int = 256
    reg: float = 1e-4
    head_hidden: int = 0
    negative_target: float | None = None  # None -> dataset minimum reward
    seed: int = 2023


class RewardModel(Module):
    def __init__(self, n_users: int, n_items: int, dim: int, reward_min: float, reward_max: float,
                 head_hidden: int = 0, seed: int = 0):
        super().__init__()
        if dim <= 0:
            raise ConfigError(f"latent dimension must be positive, got {dim}")
        rng = np.random.default_rng(seed)
        self.n_users, self.n_items, self.dim = n_users, n_items, dim
        self.reward_min, self.reward_max = float(reward_min), float(reward_max)
        self.head_hidden = head_hidden
        self.user_emb = uniform_init(rng, (n_users, dim), dim)
        self.item_emb = uniform_init(rng, (n_items, dim), dim)
        self.user_bias = zeros_param((n_users,))
        self.item_bias = zeros_param((n_items,))
        self.global_bias = zeros_param((1,))
        if head_hidden > 0:
            self.head = MLP(2 * dim, 1, head_hidden, rng)
        self.train_rmse: float | None = None
        self.val_rmse: float | None = None

    def forward(self, users, items) -> Tensor:
        u = T.gather_rows(self.user_emb, users)
        v = T.gather_rows(self.item_emb, items)
        out = T.sum_(T.mul(u, v), axis=-1)
        out = T.add(out, T.gather_rows(T.reshape(self.user_bias, (-1, 1)), users)[..., 0])
        out = T.add(out, T.gather_rows(T.reshape(self.item_bias, (-1, 1)), items)[..., 0])
        out = T.add(out, self.global_bias)
        if self.head_hidden > 0:
            out = T.add(out, self.head(T.concat([u, v], axis=-1))[..., 0])
        return out

    def _check_ids(self, users, items) -> None:
        users, items = np.asarray(users), np.asarray(items)
        if users.size and (users.min() < 0 or users.max() >= self.n_users):
            raise ContractViolation("user id out of range")
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise ContractViolation("item id out of range")

    def predict(self, users, items) -> np.ndarray:
        """Clipped predictions for aligned id arrays."""
        self._check_ids(users, items)
        raw = self.forward(np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64)).data
        return np.clip(raw, self.reward_min, self.reward_max)

    def predict_user(self, user: int) -> np.ndarray:
        """Clipped predictions for one user over every item."""
        return self.predict(np.full(self.n_items, user), np.arange(self.n_items))


def predict_reward(model: RewardModel, user_id: int, item_id: int) -> float:
    return float(model.predict(np.array([user_id]), np.array([item_id]))[0])


def rmse(model: RewardModel, log: InteractionLog) -> float:
    pred = model.predict(log.users, log.items)
    return float(np.sqrt(np.mean((pred - log.rewards) ** 2)))


def train_reward_model(
    log: InteractionLog,
    dim: int,
    n_negatives: int = 0,
    config: MFConfig | None = None,
    validation: InteractionLog | None = None,
    reward_range: tuple[float, float] | None = None,
) -> RewardModel:
    """Fit biased MF by minibatch Adam on squared error.

    Each epoch draws ``n_negatives`` unobserved items per observed record
    (same user) and regresses them onto ``negative_target``.
    """
    config = config or MFConfig()
    if len(log) == 0:
        raise DataError("cannot train a reward model on an empty log")
    if dim <= 0:
        raise ConfigError(f"latent dimension must be positive, got {dim}")
    if n_negatives < 0:
        raise ConfigError("n_negatives must be >= 0")
    lo, hi = reward_range if reward_range else (float(log.rewards.min()), float(log.rewards.max()))
    neg_target = lo if config.negative_target is None else config.negative_target
    model = RewardModel(log.n_users, log.n_items, dim, lo, hi, config.head_hidden, config.seed)
    model.global_bias.data[:] = log.rewards.mean()
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(model.parameters(), lr=config.lr)
    observed = np.zeros((log.n_users, log.n_items), dtype=bool)
    observed[log.users, log.items] = True

    for _ in range(config.epochs):
        users, items, targets = log.users, log.items, log.rewards
        if n_negatives > 0:
            nu, ni = _sample_negatives(rng, log.users, observed, n_negatives)
            users = np.concatenate([users, nu])
            items = np.concatenate([items, ni])
            targets = np.concatenate([targets, np.full(len(nu), neg_target)])
        order = rng.permutation(len(users))
        for start in range(0, len(order), config.batch_size):
            b = order[start : start + config.batch_size]
            with Tape() as tape:
                pred = model.forward(users[b], items[b])
                err = T.sub(pred, targets[b])
                loss = T.mean(T.square(err))
                if config.reg > 0:
                    u = T.gather_rows(model.user_emb, users[b])
                    v = T.gather_rows(model.item_emb, items[b])
                    penalty = T.mean(T.add(T.sum_(T.square(u), axis=-1), T.sum_(T.square(v), axis=-1)))
                    loss = T.add(loss, T.mul(penalty, config.reg))
            backward(tape, loss, model.parameters())
            opt.step()

    model.train_rmse = rmse(model, log)
    if validation is not None and len(validation):
        model.val_rmse = rmse(model, validation)
    return model


def _sample_negatives(rng, users: np.ndarray, observed: np.ndarray, k: int):
    n_items = observed.shape[1]
    rep = np.repeat(users, k)
    cand = rng.integers(0, n_items, size=len(rep))
    # resample collisions a few rounds, then drop whatever still collides
    for _ in range(10):
        bad = observed[rep, cand]
        if not bad.any():
            break
        cand[bad] = rng.integers(0, n_items, size=int(bad.sum()))
    keep = ~observed[rep, cand]
    return rep[keep], cand[keep]
