"""Long-term RL metrics, exposure metrics and user-model quality metrics."""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from recrl.data.dataset import ItemCatalog
from recrl.errors import ContractViolation


@dataclass
class RLMetrics:
    R_cumu: float
    R_avg: float
    length: float
    per_episode: np.ndarray  # columns: R_cumu, R_avg, length


def _rewards_of(traj) -> np.ndarray:
    return np.asarray(getattr(traj, "rewards", traj), dtype=np.float64)


def compute_rl_metrics(trajectories: Sequence) -> RLMetrics:
    """Undiscounted per-episode return, length and mean reward, averaged over episodes.

    Accepts trajectories or plain reward sequences. Per-episode sums and the
    cross-episode means are correctly rounded, so results do not depend on
    summation order.
    """
    if len(trajectories) == 0:
        raise ContractViolation("no trajectories to score")
    rows = np.empty((len(trajectories), 3))
    for k, tr in enumerate(trajectories):
        r = _rewards_of(tr)
        if r.size == 0:
            raise ContractViolation("zero-length trajectory")
        total = math.fsum(r)
        rows[k] = (total, total / r.size, r.size)
    return RLMetrics(_exact_mean(rows[:, 0]), _exact_mean(rows[:, 1]), _exact_mean(rows[:, 2]), rows)


def _exact_mean(values: np.ndarray) -> float:
    # floats are exact rationals: sum and divide exactly, round once
    return float(sum(map(Fraction, values.tolist()), Fraction(0)) / len(values))


def episode_diversity(items: Sequence[int], category: np.ndarray) -> float:
    """1 - share of same-category pairs; 1 for lists shorter than two."""
    L = len(items)
    if L <= 1:
        return 1.0
    cats = np.asarray(category)[np.asarray(items, dtype=np.int64)]
    same = (cats[:, None] == cats[None, :]).sum() - L  # ordered pairs, diagonal removed
    return 1.0 - same / (L * (L - 1))


def compute_exposure_metrics(item_lists: Sequence[Sequence[int]], catalog: ItemCatalog) -> tuple[float, float, float]:
    """(coverage, diversity, novelty) of the recommended item lists."""
    lists = [np.asarray(getattr(x, "actions", x), dtype=np.int64) for x in item_lists]
    lists = [x for x in lists if x.size]
    if not lists:
        return 0.0, 1.0, 0.0
    every = np.concatenate(lists)
    coverage = len(np.unique(every)) / catalog.n_items
    diversity = float(np.mean([episode_diversity(x, catalog.category) for x in lists]))
    floor = 1.0 / (2.0 * max(catalog.n_train_records, 1))
    novelty = float(np.mean(-np.log2(np.maximum(catalog.popularity[every], floor))))
    return float(coverage), diversity, novelty


# ---------------------------------------------------------------------------
# user-model quality


def error_metrics(pred, truth) -> dict[str, float]:
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.size == 0 or pred.shape != truth.shape:
        raise ContractViolation("predictions and truth must be non-empty and aligned")
    err = pred - truth
    mse = float(np.mean(err**2))
    return {"MAE": float(np.mean(np.abs(err))), "MSE": mse, "RMSE": float(np.sqrt(mse))}


def ranking_metrics(rankings: Mapping[int, Sequence[int]], relevant: Mapping[int, set], k: int) -> dict[str, float]:
    """Top-k metrics averaged over users that have at least one relevant item.

    NDCG uses binary gains and a log2(rank + 1) discount.
    """
    if k < 1:
        raise ContractViolation("k must be >= 1")
    rows = []
    for u, ranked in rankings.items():
        rel = relevant.get(u, set())
        if not rel:
            continue
        top = list(ranked)[:k]
        hits = np.array([i in rel for i in top], dtype=np.float64)
        n_hit = hits.sum()
        discounts = 1.0 / np.log2(np.arange(2, len(top) + 2))
        idcg = discounts[: min(len(rel), len(top))].sum()
        first = np.flatnonzero(hits)
        precision_at = np.cumsum(hits) / np.arange(1, len(top) + 1)
        rows.append((
            n_hit / len(rel),
            n_hit / k,
            float((hits * discounts).sum() / idcg) if idcg > 0 else 0.0,
            float(n_hit > 0),
            float((precision_at * hits).sum() / min(len(rel), k)),
            1.0 / (first[0] + 1) if first.size else 0.0,
        ))
    if not rows:
        raise ContractViolation("no user has a relevant item")
    m = np.mean(rows, axis=0)
    names = ("Recall", "Precision", "NDCG", "HitRate", "MAP", "MRR")
    return {f"{n}@{k}": float(v) for n, v in zip(names, m)}


def compute_user_model_metrics(users, items, pred, truth, k: int = 10, threshold: float | None = None) -> dict[str, float]:
    """Pointwise errors on aligned (user, item) pairs plus per-user top-k
    metrics from ranking each user's pairs by prediction.

    An item is relevant when its true reward is >= ``threshold`` (default: the
    mean true reward).
    """
    users, items = np.asarray(users), np.asarray(items)
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    out = error_metrics(pred, truth)
    thr = float(truth.mean()) if threshold is None else threshold
    rankings, relevant = {}, {}
    for u in np.unique(users):
        sel = np.flatnonzero(users == u)
        order = sel[np.lexsort((items[sel], -pred[sel]))]  # score desc, item id asc
        rankings[int(u)] = [int(i) for i in items[order]]
        relevant[int(u)] = {int(i) for i in items[sel][truth[sel] >= thr]}
    try:
        out.update(ranking_metrics(rankings, relevant, k))
    except ContractViolation:
        pass  # nothing relevant anywhere: top-k metrics undefined
    return out


@dataclass
class MetricReport:
    R_cumu: float
    R_avg: float
    length: float
    coverage: float
    diversity: float
    novelty: float
    per_episode: np.ndarray = field(repr=False, default=None)
    epoch: int | None = None
    estimated_reward: float | None = None  # user-model estimate on chosen items
    true_reward: float | None = None  # mean per-step reward actually received

    def row(self) -> dict[str, float]:
        out = {"R_cumu": self.R_cumu, "R_avg": self.R_avg, "length": self.length,
               "coverage": self.coverage, "diversity": self.diversity, "novelty": self.novelty}
        if self.estimated_reward is not None:
            out["estimated_reward"] = self.estimated_reward
            out["true_reward"] = self.true_reward
        return out
