"""State trackers: encode (user, interaction history) into a fixed-size vector.

All five trackers share one item-embedding table with an extra padding row
(index ``n_items``). Sequence trackers see the history truncated to the most
recent ``max_history`` items and left-padded with that row, so every batch has
a fixed (B, max_history, dim) shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from recrl.core import tensor as T
from recrl.core.nn import Embedding, GRUCellParams, Linear, Module, gru_cell, uniform_init, zeros_param
from recrl.core.tensor import Tensor
from recrl.env.environment import Observation
from recrl.errors import ConfigError, ContractViolation

TRACKER_KINDS = ("average", "gru", "caser", "sasrec", "nextitnet")


@dataclass
class TrackerConfig:
    kind: str = "average"
    embedding_dim: int = 32
    max_history: int = 10
    reward_weighting: bool = False

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in TRACKER_KINDS:
            raise ConfigError(f"unknown tracker kind {self.kind!r}; expected one of {TRACKER_KINDS}")
        if self.embedding_dim < 1 or self.max_history < 1:
            raise ConfigError("embedding_dim and max_history must be >= 1")


@dataclass
class PackedHistory:
    users: np.ndarray  # (B,)
    items: np.ndarray  # (B, L) left-padded with the padding id
    rewards: np.ndarray  # (B, L), 1.0 on padding
    lengths: np.ndarray  # (B,) real items kept, <= L


def pack_observations(obs: Sequence[Observation], max_history: int, n_items: int) -> PackedHistory:
    B = len(obs)
    items = np.full((B, max_history), n_items, dtype=np.int64)
    rewards = np.ones((B, max_history))
    lengths = np.zeros(B, dtype=np.int64)
    users = np.empty(B, dtype=np.int64)
    for b, o in enumerate(obs):
        users[b] = o.user_id
        hist = o.history[-max_history:]
        n = len(hist)
        lengths[b] = n
        if n:
            ids = np.fromiter((i for i, _ in hist), dtype=np.int64, count=n)
            if ids.min() < 0 or ids.max() >= n_items:
                raise ContractViolation("history item out of range")
            items[b, max_history - n :] = ids
            rewards[b, max_history - n :] = [r for _, r in hist]
    return PackedHistory(users, items, rewards, lengths)


class StateTracker(Module):
    def __init__(self, config: TrackerConfig, n_users: int, n_items: int, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.n_users, self.n_items = n_users, n_items
        self.pad_id = n_items
        self.item_emb = Embedding(n_items + 1, config.embedding_dim, rng)

    @property
    def output_dim(self) -> int:
        raise NotImplementedError

    def _item_sequence(self, packed: PackedHistory) -> Tensor:
        E = self.item_emb(packed.items)
        if self.config.reward_weighting:
            E = T.mul(E, packed.rewards[..., None])
        return E

    def forward(self, packed: PackedHistory) -> Tensor:
        raise NotImplementedError

    def encode_batch(self, obs: Sequence[Observation]) -> Tensor:
        for o in obs:
            if not 0 <= o.user_id < self.n_users:
                raise ContractViolation(f"user {o.user_id} out of range")
        return self.forward(pack_observations(obs, self.config.max_history, self.n_items))

    def encode(self, obs: Observation) -> np.ndarray:
        return self.encode_batch([obs]).data[0]


class AverageTracker(StateTracker):
    """concat(user embedding, mean of history item embeddings)."""

    def __init__(self, config, n_users, n_items, rng):
        super().__init__(config, n_users, n_items, rng)
        self.user_emb = Embedding(n_users, config.embedding_dim, rng)

    @property
    def output_dim(self) -> int:
        return 2 * self.config.embedding_dim

    def forward(self, packed):
        E = self._item_sequence(packed)
        L = packed.items.shape[1]
        w = np.zeros(packed.items.shape)
        pos = np.arange(L)[None, :] >= (L - packed.lengths)[:, None]
        w[pos] = 1.0
        w = w / np.maximum(packed.lengths, 1)[:, None]
        # empty history: the last slot holds the padding row, weight it 1
        w[packed.lengths == 0, L - 1] = 1.0
        pooled = T.sum_(T.mul(E, w[..., None]), axis=1)
        return T.concat([self.user_emb(packed.users), pooled], axis=-1)


class GRUTracker(StateTracker):
    """Final hidden state of a GRU run over the padded item sequence."""

    def __init__(self, config, n_users, n_items, rng):
        super().__init__(config, n_users, n_items, rng)
        self.cell = GRUCellParams(config.embedding_dim, config.embedding_dim, rng)

    @property
    def output_dim(self) -> int:
        return self.config.embedding_dim

    def forward(self, packed):
        E = self._item_sequence(packed)
        B, L = packed.items.shape
        h = Tensor(np.zeros((B, self.config.embedding_dim)))
        for t in range(L):
            h = gru_cell(E[:, t, :], h, self.cell)
        return h


class CaserTracker(StateTracker):
    """Horizontal filters (max-pooled over time) plus a vertical filter over the
    (time x latent) embedding "image"."""

    HEIGHTS = (1, 2)
    FILTERS_PER_HEIGHT = 2

    def __init__(self, config, n_users, n_items, rng):
        super().__init__(config, n_users, n_items, rng)
        d, L = config.embedding_dim, config.max_history
        self.heights = tuple(h for h in self.HEIGHTS if h <= L)
        for h in self.heights:
            setattr(self, f"h{h}_w", uniform_init(rng, (h * d, self.FILTERS_PER_HEIGHT), h * d))
            setattr(self, f"h{h}_b", zeros_param((self.FILTERS_PER_HEIGHT,)))
        self.v_w = uniform_init(rng, (L, 1), L)

    @property
    def output_dim(self) -> int:
        return len(self.heights) * self.FILTERS_PER_HEIGHT + self.config.embedding_dim

    def forward(self, packed):
        E = self._item_sequence(packed)
        B, L = packed.items.shape
        parts = []
        for h in self.heights:
            windows = T.concat([E[:, k : L - h + 1 + k, :] for k in range(h)], axis=-1)
            conv = T.relu(T.add(T.matmul(windows, getattr(self, f"h{h}_w")), getattr(self, f"h{h}_b")))
            parts.append(T.max_(conv, axis=1))
        vert = T.matmul(T.transpose(E), self.v_w)  # (B, d, 1)
        parts.append(T.reshape(vert, (B, self.config.embedding_dim)))
        return T.concat(parts, axis=-1)


class SASRecTracker(StateTracker):
    """One causal single-head self-attention block with learned positions."""

    def __init__(self, config, n_users, n_items, rng):
        super().__init__(config, n_users, n_items, rng)
        d, L = config.embedding_dim, config.max_history
        self.pos_emb = uniform_init(rng, (L, d), d)
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.ff1 = Linear(d, d, rng)
        self.ff2 = Linear(d, d, rng)

    @property
    def output_dim(self) -> int:
        return self.config.embedding_dim

    def sequence_output(self, packed) -> Tensor:
        E = self._item_sequence(packed)
        L = packed.items.shape[1]
        X = T.add(E, self.pos_emb)
        scores = T.div(T.matmul(self.q(X), T.transpose(self.k(X))), np.sqrt(self.config.embedding_dim))
        causal = np.tril(np.ones((L, L), dtype=bool))
        attn = T.softmax(T.masked_fill(scores, np.broadcast_to(causal, scores.shape)), axis=-1)
        X = T.add(X, T.matmul(attn, self.v(X)))
        return T.add(X, self.ff2(T.relu(self.ff1(X))))

    def forward(self, packed):
        return self.sequence_output(packed)[:, -1, :]


class NextItNetTracker(StateTracker):
    """Residual stack of dilated causal convolutions (kernel 2, dilations 1 and 2)."""

    DILATIONS = (1, 2)

    def __init__(self, config, n_users, n_items, rng):
        super().__init__(config, n_users, n_items, rng)
        d = config.embedding_dim
        for k, _ in enumerate(self.DILATIONS):
            setattr(self, f"conv{k}", Linear(2 * d, d, rng))

    @property
    def output_dim(self) -> int:
        return self.config.embedding_dim

    def sequence_output(self, packed) -> Tensor:
        X = self._item_sequence(packed)
        B, L = packed.items.shape
        d = self.config.embedding_dim
        for k, dil in enumerate(self.DILATIONS):
            if dil >= L:
                shifted = Tensor(np.zeros((B, L, d)))
            else:
                shifted = T.concat([Tensor(np.zeros((B, dil, d))), X[:, : L - dil, :]], axis=1)
            conv = getattr(self, f"conv{k}")
            X = T.add(X, T.relu(conv(T.concat([shifted, X], axis=-1))))
        return X

    def forward(self, packed):
        return self.sequence_output(packed)[:, -1, :]


_CLASSES = {
    "average": AverageTracker,
    "gru": GRUTracker,
    "caser": CaserTracker,
    "sasrec": SASRecTracker,
    "nextitnet": NextItNetTracker,
}


def build_tracker(config: TrackerConfig, n_users: int, n_items: int, seed: int | np.random.Generator) -> StateTracker:
    if n_users < 1 or n_items < 1:
        raise ConfigError("tracker needs positive user and item counts")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _CLASSES[config.kind](config, n_users, n_items, rng)
