"""Synthetic datasets with known generating models, and the Coat converter."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from recrl.data.dataset import Dataset, InteractionLog, ItemCatalog
from recrl.errors import ConfigError, DataFormatError

COAT_USERS, COAT_ITEMS = 290, 300
COAT_TRAIN_PER_USER, COAT_TEST_PER_USER = 24, 16
COAT_JACKET_TYPES = 16


def _time_order(rng: np.random.Generator, users: np.ndarray) -> np.ndarray:
    # timestamps: a random permutation of record positions, so each user's order is random
    return rng.permutation(len(users)).astype(np.int64)


def lowrank_dataset(
    n_users: int,
    n_items: int,
    rank: int = 1,
    noise: float = 0.0,
    density: float = 0.5,
    test_density: float = 0.2,
    n_categories: int = 0,
    seed: int = 0,
) -> Dataset:
    """Ratings ``r(u, i) = a_u . b_i (+ noise)`` with factors drawn from U(0.5, 1.5).

    Train pairs are a ``density`` fraction of the matrix; test pairs an
    independent ``test_density`` draw from the pairs not in train (or from all
    pairs when train is full). The generating factors are kept in
    ``Dataset.extra`` as the oracle.
    """
    if n_users <= 0 or n_items <= 0 or rank <= 0:
        raise ConfigError("users, items and rank must be positive")
    if not 0 < density <= 1 or not 0 <= test_density <= 1:
        raise ConfigError("densities must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    A = rng.uniform(0.5, 1.5, size=(n_users, rank))
    B = rng.uniform(0.5, 1.5, size=(n_items, rank))
    truth = A @ B.T
    n_pairs = n_users * n_items
    n_train = max(1, int(round(density * n_pairs)))
    order = rng.permutation(n_pairs)
    train_idx = np.sort(order[:n_train])
    rest = order[n_train:] if n_train < n_pairs else order
    n_test = max(1, int(round(test_density * n_pairs))) if test_density > 0 else 0
    test_idx = np.sort(rest[: min(n_test, len(rest))])

    def make(idx):
        u, i = np.divmod(idx, n_items)
        r = truth[u, i] + noise * rng.normal(size=len(idx))
        return InteractionLog(u, i, r, _time_order(rng, u), n_users, n_items)

    train, test = make(train_idx), make(test_idx)
    cats = rng.integers(0, n_categories, size=n_items) if n_categories > 0 else None
    rmin = float(min(train.rewards.min(), test.rewards.min() if len(test) else np.inf))
    rmax = float(max(train.rewards.max(), test.rewards.max() if len(test) else -np.inf))
    return Dataset(f"lowrank{rank}", train, test, ItemCatalog.from_log(train, cats), rmin, rmax,
                   extra={"user_factors": A, "item_factors": B, "truth": truth})


def coat_like_dataset(seed: int = 2023, selection_strength: float = 0.6) -> Dataset:
    """A stand-in with Coat's shape: 290 users x 300 items, 1-5 stars, 16 jacket types.

    Each user self-selects 24 training items with probability increasing in
    their latent affinity (missing-not-at-random, like Coat's training split)
    and rates 16 uniformly random other items for the test split.
    """
    rng = np.random.default_rng(seed)
    n_u, n_i = COAT_USERS, COAT_ITEMS
    # uneven category sizes, as in a real catalog
    cat_weights = rng.dirichlet(np.full(COAT_JACKET_TYPES, 2.0))
    category = rng.choice(COAT_JACKET_TYPES, size=n_i, p=cat_weights)
    category[:COAT_JACKET_TYPES] = np.arange(COAT_JACKET_TYPES)
    rank = 4
    U = rng.normal(size=(n_u, rank))
    V = rng.normal(size=(n_i, rank)) * 0.6
    cat_taste = rng.normal(scale=0.8, size=(n_u, COAT_JACKET_TYPES))
    item_quality = rng.normal(scale=0.5, size=n_i)
    score = U @ V.T / np.sqrt(rank) + cat_taste[:, category] + item_quality[None, :]
    # latent score -> 1..5 stars; cut points put the mass of random exposures around 2-3 stars
    cuts = np.array([-0.9, -0.1, 0.7, 1.5])
    noisy = score + rng.normal(scale=0.35, size=score.shape)
    stars = 1.0 + (noisy[..., None] > cuts).sum(axis=-1)

    tr_u, tr_i, te_u, te_i = [], [], [], []
    for u in range(n_u):
        w = np.exp(selection_strength * score[u])
        chosen = rng.choice(n_i, size=COAT_TRAIN_PER_USER, replace=False, p=w / w.sum())
        remaining = np.setdiff1d(np.arange(n_i), chosen)
        tested = rng.choice(remaining, size=COAT_TEST_PER_USER, replace=False)
        tr_u += [u] * len(chosen)
        tr_i += list(chosen)
        te_u += [u] * len(tested)
        te_i += list(tested)

    def make(us, its):
        us, its = np.array(us), np.array(its)
        return InteractionLog(us, its, stars[us, its], _time_order(rng, us), n_u, n_i)

    train, test = make(tr_u, tr_i), make(te_u, te_i)
    return Dataset("coat_like", train, test, ItemCatalog.from_log(train, category), 1.0, 5.0,
                   extra={"stars": stars, "score": score})


def convert_coat(raw_dir: str | Path) -> Dataset:
    """Read the original Coat release (``train.ascii``, ``test.ascii``,
    ``user_item_features/item_features.ascii``) into a :class:`Dataset`.

    Ratings are dense 290 x 300 matrices with 0 for missing; the item category
    is the one-hot jacket-type block (feature columns 2-17).
    """
    raw_dir = Path(raw_dir)

    def matrix(name):
        p = raw_dir / name
        if not p.exists():
            raise DataFormatError(f"Coat file not found: {p}")
        return np.loadtxt(p)

    tr, te = matrix("train.ascii"), matrix("test.ascii")
    if tr.shape != te.shape:
        raise DataFormatError("Coat train/test matrices differ in shape")
    n_u, n_i = tr.shape

    def make(m):
        u, i = np.nonzero(m)
        # no timestamps in Coat: order within a user falls back to item id
        return InteractionLog(u, i, m[u, i], np.zeros(len(u), dtype=np.int64), n_u, n_i)

    category = None
    feat_path = raw_dir / "user_item_features" / "item_features.ascii"
    if feat_path.exists():
        feats = np.loadtxt(feat_path)
        category = feats[:, 2 : 2 + COAT_JACKET_TYPES].argmax(axis=1)
    train, test = make(tr), make(te)
    return Dataset("coat", train, test, ItemCatalog.from_log(train, category), 1.0, 5.0)
