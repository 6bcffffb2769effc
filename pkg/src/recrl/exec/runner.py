"""Trainer and evaluator: the two learning paradigms and the three evaluation modes."""

from __future__ import annotations

import csv
import math
import re
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from recrl.buffer import Buffer, DEFAULT_CAPACITY, extract_trajectories, sample_batch
from recrl.collector import Collector
from recrl.data.dataset import ItemCatalog
from recrl.env.environment import QuitRule, RecEnv
from recrl.env.reward_model import RewardModel
from recrl.errors import ConfigError, ContractViolation
from recrl.exec.metrics import MetricReport, compute_exposure_metrics, compute_rl_metrics
from recrl.policy.base import BATCH_RL, ON_POLICY, Policy

EVAL_MODES = ("FreeB", "NX_0_", "NX_X_")
PARADIGMS = ("UserModel", "OfflineLogs")


def parse_mode(text: str) -> tuple[str, int]:
    """'FreeB' | 'NX_0_' | 'NX_<X>_' (X >= 1) -> (mode, X)."""
    t = text.strip()
    if t.lower() == "freeb":
        return "FreeB", 0
    m = re.fullmatch(r"(?i)nx_(\d+|x)_", t)
    if not m:
        raise ConfigError(f"unknown evaluation mode {text!r}; expected FreeB, NX_0_ or NX_<X>_")
    if m.group(1).lower() == "x":
        return "NX_X_", 10
    x = int(m.group(1))
    return ("NX_0_", 0) if x == 0 else ("NX_X_", x)


@dataclass
class EvalConfig:
    mode: str = "FreeB"
    X: int = 10
    n_episodes: int = 100
    max_steps: int = 30
    n_envs: int = 10
    seed: int = 2023
    stochastic: bool = False  # softmax actors sample instead of taking the argmax

    def __post_init__(self):
        mode, x = parse_mode(self.mode)
        if mode == "NX_X_" and self.mode.lower() != "nx_x_":
            self.X = x
        self.mode = mode
        if self.mode == "NX_X_" and self.X < 1:
            raise ConfigError("NX_X_ needs X >= 1")
        if self.n_episodes < 1 or self.max_steps < 1 or self.n_envs < 1:
            raise ConfigError("n_episodes, max_steps and n_envs must be >= 1")

    @property
    def label(self) -> str:
        return f"NX_{self.X}_" if self.mode == "NX_X_" else self.mode


def make_envs(model: RewardModel | None, n_items: int, n: int, category=None, quit_rule: QuitRule | None = QuitRule(),
              max_steps: int = 30, truth: dict | None = None, users=None, n_users: int | None = None,
              seed: int = 0) -> list[RecEnv]:
    """``n`` independent environments over one reward source, seeded seed, seed+1, ..."""
    return [RecEnv(model, n_items, category=category, quit_rule=quit_rule, max_steps=max_steps, truth=truth,
                   users=users, n_users=n_users, seed=seed + k) for k in range(n)]


@contextmanager
def _mode_settings(envs, config: EvalConfig):
    names = ("remove_recommended", "quit_rule", "max_steps")
    saved = [{a: getattr(e, a) for a in names if hasattr(e, a)} for e in envs]
    n_items = envs[0].n_items
    if config.mode == "NX_X_" and config.X > n_items:
        raise ConfigError(f"NX_{config.X}_ asks for more rounds than the {n_items} items available")
    try:
        for e in envs:
            if config.mode == "FreeB":
                e.remove_recommended = False
                e.max_steps = config.max_steps
            elif config.mode == "NX_0_":
                e.remove_recommended = True
                e.max_steps = config.max_steps
            else:
                e.remove_recommended = True
                if hasattr(e, "quit_rule"):
                    e.quit_rule = None
                e.max_steps = config.X
        yield
    finally:
        for e, s in zip(envs, saved):
            for a, v in s.items():
                setattr(e, a, v)


def evaluate(policy: Policy, envs: Sequence, config: EvalConfig, catalog: ItemCatalog | None = None,
             user_model: RewardModel | None = None, epoch: int | None = None) -> MetricReport:
    """Noise-free episodes under one evaluation mode (greedy unless
    ``config.stochastic``); environments are reseeded first, so repeated calls
    see the same users."""
    envs = list(envs)
    with _mode_settings(envs, config):
        for k, e in enumerate(envs):
            e.seed(config.seed + k)
            e.terminated = True
        buf = Buffer(len(envs), DEFAULT_CAPACITY, envs[0].n_items)
        Collector(envs, buf, record_masks=False).collect(
            policy, n_episodes=config.n_episodes, mode="policy" if config.stochastic else "greedy")
    trajs = extract_trajectories(buf)
    rl = compute_rl_metrics(trajs)
    if catalog is not None:
        cov, div, nov = compute_exposure_metrics([t.actions for t in trajs], catalog)
    else:
        cov = div = nov = math.nan
    report = MetricReport(rl.R_cumu, rl.R_avg, rl.length, cov, div, nov, rl.per_episode, epoch)
    if user_model is not None:
        users = np.concatenate([[t.obs[0].user_id] * len(t) for t in trajs]).astype(np.int64)
        items = np.concatenate([t.actions for t in trajs])
        report.estimated_reward = float(user_model.predict(users, items).mean())
        report.true_reward = float(np.concatenate([t.rewards for t in trajs]).mean())
    return report


# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """An epoch is ``rounds_per_epoch`` rounds. In the user-model paradigm a
    round collects experience then learns from it (on-policy: one update on the
    fresh episodes, then the buffer is emptied; off-policy: ``updates_per_round``
    sampled minibatches). Offline, a round is ``updates_per_round`` minibatches."""

    paradigm: str = "UserModel"
    epochs: int = 100
    rounds_per_epoch: int = 10
    episodes_per_round: int = 10
    steps_per_round: int = 0  # > 0 switches collection to a step budget
    updates_per_round: int = 1
    batch_size: int = 64
    eval_every: int = 1
    n_envs: int = 1
    buffer_capacity: int = DEFAULT_CAPACITY
    seed: int = 2023

    def __post_init__(self):
        norm = {p.lower(): p for p in PARADIGMS}
        key = self.paradigm.replace("_", "").replace("-", "").lower()
        if key not in norm:
            raise ConfigError(f"unknown paradigm {self.paradigm!r}; expected one of {PARADIGMS}")
        self.paradigm = norm[key]
        for name in ("epochs", "rounds_per_epoch", "updates_per_round", "batch_size", "eval_every", "n_envs",
                     "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.episodes_per_round < 1 and self.steps_per_round < 1:
            raise ConfigError("need a positive episodes_per_round or steps_per_round")


def check_paradigm(policy: Policy, paradigm: str) -> None:
    if paradigm == "UserModel" and policy.kind in BATCH_RL:
        raise ConfigError(f"{policy.kind} is a batch-RL learner and must train on offline logs")
    if paradigm == "OfflineLogs" and policy.kind in ON_POLICY:
        raise ConfigError(f"{policy.kind} is on-policy and needs fresh trajectories from a user model")


def train(policy: Policy, config: TrainConfig, envs: Sequence | None = None, buffer: Buffer | None = None,
          eval_envs: Sequence | None = None, eval_config: EvalConfig | None = None,
          catalog: ItemCatalog | None = None, user_model: RewardModel | None = None) -> list[dict]:
    """Run ``config.epochs`` epochs; returns one history row per epoch."""
    check_paradigm(policy, config.paradigm)
    rng = np.random.default_rng(config.seed)
    collector = None
    if config.paradigm == "UserModel":
        if not envs:
            raise ConfigError("the user-model paradigm needs environments")
        if buffer is None:
            buffer = Buffer(len(envs), config.buffer_capacity, envs[0].n_items)
        collector = Collector(envs, buffer)
    elif buffer is None or buffer.n_transitions() == 0:
        raise ConfigError("the offline-logs paradigm needs a non-empty prebuilt buffer")

    history = []
    total_rounds = config.epochs * config.rounds_per_epoch
    for epoch in range(config.epochs):
        row: dict = {"epoch": epoch}
        losses: dict[str, list[float]] = {}
        returns: list[float] = []
        for r in range(config.rounds_per_epoch):
            policy.set_progress((epoch * config.rounds_per_epoch + r) / total_rounds)
            if collector is not None:
                if config.steps_per_round > 0:
                    stats = collector.collect(policy, n_steps=config.steps_per_round, explore=True)
                else:
                    stats = collector.collect(policy, n_episodes=config.episodes_per_round, explore=True)
                returns.extend(stats.episode_returns)
            if policy.kind in ON_POLICY:
                trajs = extract_trajectories(buffer)
                if trajs:
                    _merge(losses, policy.update_onpolicy(trajs))
                buffer.clear()
            elif buffer.n_transitions() > 0:
                for _ in range(config.updates_per_round):
                    _merge(losses, policy.update(sample_batch(buffer, config.batch_size, rng)))
        if returns:
            row["train_return"] = float(np.mean(returns))
        for k, v in losses.items():
            row[f"loss_{k}"] = float(np.mean(v))
        last = epoch == config.epochs - 1
        if eval_envs and eval_config and (epoch % config.eval_every == 0 or last):
            report = evaluate(policy, eval_envs, eval_config, catalog, user_model, epoch)
            row.update(report.row())
        history.append(row)
    return history


def _merge(acc: dict, losses: dict) -> None:
    for k, v in losses.items():
        acc.setdefault(k, []).append(v)


# ---------------------------------------------------------------------------
# history and summary files

METRIC_COLUMNS = ("R_cumu", "R_avg", "length", "coverage", "diversity", "novelty", "estimated_reward", "true_reward")


def summarize(history: list[dict], fraction: float = 0.25) -> dict[str, float]:
    """Mean of each evaluation metric over the last ``fraction`` of epochs."""
    if not history:
        raise ContractViolation("empty history")
    n = max(1, math.ceil(len(history) * fraction))
    tail = [r for r in history[-n:] if "R_cumu" in r]
    if not tail:
        tail = [r for r in history if "R_cumu" in r][-1:]
    out: dict[str, float] = {"epochs": float(len(history)), "averaged_epochs": float(len(tail))}
    for col in METRIC_COLUMNS:
        vals = [r[col] for r in tail if col in r]
        if vals:
            out[col] = float(np.mean(vals))
    return out


def _header(meta: dict | None) -> str:
    if not meta:
        return ""
    return "# " + " ".join(f"{k}={meta[k]}" for k in sorted(meta)) + "\n"


def write_history(history: list[dict], path, meta: dict | None = None) -> None:
    cols = ["epoch"]
    for r in history:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="") as fh:
        fh.write(_header(meta))
        w = csv.DictWriter(fh, fieldnames=cols, restval="", lineterminator="\n")
        w.writeheader()
        for r in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        rows.append({k: (float(v) if k != "epoch" else int(v)) for k, v in r.items() if v != ""})
    return rows


def write_summary(summary: dict, path, meta: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_header(meta))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in summary.items():
            w.writerow([k, repr(float(v))])


def write_episodes(report: MetricReport, path, meta: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(_header(meta))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "R_cumu", "R_avg", "length"])
        for k, (rc, ra, ln) in enumerate(report.per_episode):
            w.writerow([k, repr(float(rc)), repr(float(ra)), int(ln)])


__all__ = [
    "EVAL_MODES", "PARADIGMS", "EvalConfig", "TrainConfig", "parse_mode", "make_envs", "evaluate", "train",
    "check_paradigm", "summarize", "write_history", "read_history", "write_summary", "write_episodes",
]
