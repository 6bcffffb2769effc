"""Experiment configuration and the prepare / train / evaluate / report stages.

A run is described by one INI file. Sections map onto dataclasses; unknown
sections or keys are rejected, and ``to_ini`` writes a file that parses back
to an equal configuration. Every artifact written into the output directory
carries the run's config hash and seed.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from recrl.buffer import CONSTRUCTION_METHODS, build_offline_buffer
from recrl.checkpoint import config_hash, load_checkpoint, save_checkpoint
from recrl.data import DATA_ROOT_ENV, Dataset, load_dataset
from recrl.env import MFConfig, QuitRule, RewardModel, train_reward_model
from recrl.errors import CheckpointError, ConfigError, InputError
from recrl.exec import (
    EvalConfig, TrainConfig, check_paradigm, evaluate, make_envs, read_history, summarize, train, write_episodes,
    write_history, write_summary,
)
from recrl.exec.metrics import compute_user_model_metrics
from recrl.policy import PolicyConfig, load_policy, make_policy, save_policy
from recrl.tracker import TrackerConfig

# ---------------------------------------------------------------------------
# configuration sections


@dataclass
class ExperimentSection:
    dataset: str = ""
    name: str = "run"
    seed: int = 2023
    out: str = "runs/run"


@dataclass
class UserModelSection:
    dim: int = 16
    n_negatives: int = 0
    epochs: int = 100
    lr: float = 0.01
    reg: float = 0.1
    batch_size: int = 256
    head_hidden: int = 0
    negative_target: float | None = None


@dataclass
class EvalModelSection:
    """The completion model behind evaluation, fit on the held-out split."""

    dim: int = 16
    epochs: int = 60
    lr: float = 0.01
    reg: float = 0.1
    batch_size: int = 256


@dataclass
class EnvSection:
    quit_window: int = 4
    quit_threshold: int = 2
    quit_min_reward: float | None = None
    quit_uses_categories: bool = True
    max_steps: int = 30
    n_envs: int = 4


@dataclass
class TrainSection:
    paradigm: str = "UserModel"
    epochs: int = 100
    rounds_per_epoch: int = 10
    episodes_per_round: int = 8
    steps_per_round: int = 0
    updates_per_round: int = 10
    batch_size: int = 128
    eval_every: int = 1
    buffer_capacity: int = 100_000
    buffer_method: str = "sequential"
    buffer_window: int | None = None

    def __post_init__(self):
        self.buffer_method = self.buffer_method.lower()
        if self.buffer_method not in CONSTRUCTION_METHODS:
            raise ConfigError(f"unknown buffer_method {self.buffer_method!r}; expected one of {CONSTRUCTION_METHODS}")


@dataclass
class EvalSection:
    mode: str = "FreeB"
    X: int = 10
    n_episodes: int = 100
    max_steps: int = 30
    n_envs: int = 10
    stochastic: bool = True


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    user_model: UserModelSection = field(default_factory=UserModelSection)
    eval_model: EvalModelSection = field(default_factory=EvalModelSection)
    env: EnvSection = field(default_factory=EnvSection)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    # -- derived objects ------------------------------------------------------
    @property
    def seed(self) -> int:
        return self.experiment.seed

    def policy_config(self) -> PolicyConfig:
        return dataclasses.replace(self.policy, seed=self.seed)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t.paradigm, t.epochs, t.rounds_per_epoch, t.episodes_per_round, t.steps_per_round,
                           t.updates_per_round, t.batch_size, t.eval_every, self.env.n_envs, t.buffer_capacity,
                           self.seed)

    def eval_config(self) -> EvalConfig:
        e = self.eval
        return EvalConfig(e.mode, e.X, e.n_episodes, e.max_steps, e.n_envs, self.seed + 1000, e.stochastic)

    def quit_rule(self) -> QuitRule:
        e = self.env
        return QuitRule(e.quit_window, e.quit_threshold, e.quit_min_reward, e.quit_uses_categories)

    def dataset_path(self) -> Path:
        p = Path(self.experiment.dataset)
        if p.is_absolute():
            return p
        local = self.base_dir / p
        if local.exists():
            return local
        root = os.environ.get(DATA_ROOT_ENV)
        return Path(root) / p if root else local

    def as_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def hash(self) -> str:
        d = self.as_dict()
        d["experiment"].pop("out")  # where a run is written does not change what it computes
        return config_hash(d)

    def meta(self) -> dict:
        return {"config_hash": self.hash(), "seed": self.seed}


SECTIONS = ("experiment", "user_model", "eval_model", "env", "tracker", "policy", "train", "eval")
_EXCLUDED = {"policy": {"seed"}}  # the experiment seed drives every generator


def _section_class(name: str):
    return typing.get_type_hints(ExperimentConfig)[name]


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _coerce(raw: str, tp, where: str):
    optional = False
    args = typing.get_args(tp)
    if isinstance(tp, types.UnionType) or typing.get_origin(tp) is typing.Union:
        inner = [a for a in args if a is not type(None)]
        optional, tp = True, inner[0]
    raw = raw.strip()
    if optional and raw.lower() in ("", "none"):
        return None
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise InputError(f"{where}: cannot read {raw!r} as {tp.__name__}") from None


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(source, base_dir=None) -> ExperimentConfig:
    """Parse INI text or a path. Unknown sections and keys raise InputError;
    inconsistent values raise ConfigError."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    where = "<config>"
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and "[" not in source):
        path = Path(source)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        where = str(path)
        base_dir = base_dir or path.parent
        text = path.read_text()
    else:
        text = source
    try:
        parser.read_string(text, source=where)
    except configparser.Error as e:
        raise InputError(f"{where}: {e}") from None
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise InputError(f"{where}: unknown section(s) {unknown}; expected {list(SECTIONS)}")
    kwargs = {}
    for name in SECTIONS:
        cls = _section_class(name)
        types_ = {k: v for k, v in _field_types(cls).items() if k not in _EXCLUDED.get(name, set())}
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in types_:
                    raise InputError(f"{where}: unknown key {key!r} in [{name}]; allowed: {sorted(types_)}")
                values[key] = _coerce(raw, types_[key], f"{where} [{name}] {key}")
        try:
            kwargs[name] = cls(**values)
        except TypeError as e:
            raise InputError(f"{where} [{name}]: {e}") from None
    cfg = ExperimentConfig(**kwargs, base_dir=Path(base_dir or "."))
    cfg.train_config()  # validate the derived configs now rather than mid-run
    cfg.eval_config()
    cfg.quit_rule()
    if not cfg.experiment.dataset:
        raise InputError(f"{where}: [experiment] dataset is required")
    return cfg


def to_ini(cfg: ExperimentConfig) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        section = getattr(cfg, name)
        for f in dataclasses.fields(section):
            if f.name in _EXCLUDED.get(name, set()):
                continue
            lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# artifacts

USER_MODEL_FILE = "user_model.ckpt"
EVAL_MODEL_FILE = "eval_model.ckpt"
POLICY_FILE = "policy.ckpt"
HISTORY_FILE = "history.csv"
SUMMARY_FILE = "summary.csv"
EVAL_SUMMARY_FILE = "eval_summary.csv"
EPISODES_FILE = "episodes.csv"
PREPARE_FILE = "user_model_metrics.csv"
RUN_FILE = "run.json"


def out_dir(cfg: ExperimentConfig, override=None) -> Path:
    d = Path(override) if override else Path(cfg.experiment.out)
    if not d.is_absolute() and not override:
        d = cfg.base_dir / d
    d.mkdir(parents=True, exist_ok=True)
    return d


def load_data(cfg: ExperimentConfig) -> Dataset:
    needs_categories = cfg.env.quit_uses_categories and cfg.env.quit_min_reward is None
    return load_dataset(cfg.dataset_path(), require_categories=needs_categories)


def save_reward_model(model: RewardModel, path, meta: dict) -> None:
    m = dict(meta, n_users=model.n_users, n_items=model.n_items, dim=model.dim, reward_min=model.reward_min,
             reward_max=model.reward_max, head_hidden=model.head_hidden)
    save_checkpoint(path, model.state_dict(), m)


def load_reward_model(path, expect_hash: str | None = None) -> RewardModel:
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path} not found; run the prepare stage first")
    meta, arrays = load_checkpoint(path)
    if expect_hash is not None and meta.get("model_hash") != expect_hash:
        raise CheckpointError(f"{path} was trained under a different user-model configuration")
    model = RewardModel(meta["n_users"], meta["n_items"], meta["dim"], meta["reward_min"], meta["reward_max"],
                        meta["head_hidden"])
    model.load_state_dict(arrays)
    return model


def _model_hash(cfg: ExperimentConfig, which: str) -> str:
    return config_hash({"dataset": cfg.experiment.dataset, "seed": cfg.seed,
                        which: dataclasses.asdict(getattr(cfg, which))})


def _write_run_file(d: Path, cfg: ExperimentConfig) -> None:
    info = dict(cfg.meta(), name=cfg.experiment.name, n_negatives=cfg.user_model.n_negatives,
                policy=cfg.policy.kind, paradigm=cfg.train.paradigm)
    (d / RUN_FILE).write_text(json.dumps(info, sort_keys=True, indent=1) + "\n")
    (d / "config.ini").write_text(to_ini(cfg))


def prepare(cfg: ExperimentConfig, out=None) -> dict[str, float]:
    """Fit the simulated user on the training split and the completion model
    on the held-out split; report the user model's quality on held-out pairs."""
    ds = load_data(cfg)
    d = out_dir(cfg, out)
    um = cfg.user_model
    user_model = train_reward_model(
        ds.train, um.dim, um.n_negatives,
        MFConfig(um.epochs, um.lr, um.batch_size, um.reg, um.head_hidden, um.negative_target, cfg.seed),
        validation=ds.test, reward_range=(ds.reward_min, ds.reward_max))
    em = cfg.eval_model
    eval_model = train_reward_model(ds.test, em.dim, 0, MFConfig(em.epochs, em.lr, em.batch_size, em.reg, seed=cfg.seed + 1),
                                    reward_range=(ds.reward_min, ds.reward_max))
    meta = cfg.meta()
    save_reward_model(user_model, d / USER_MODEL_FILE, dict(meta, model_hash=_model_hash(cfg, "user_model")))
    save_reward_model(eval_model, d / EVAL_MODEL_FILE, dict(meta, model_hash=_model_hash(cfg, "eval_model")))
    pred = user_model.predict(ds.test.users, ds.test.items)
    metrics = compute_user_model_metrics(ds.test.users, ds.test.items, pred, ds.test.rewards)
    write_summary(metrics, d / PREPARE_FILE, meta)
    _write_run_file(d, cfg)
    return metrics


def _category(cfg: ExperimentConfig, ds: Dataset):
    return ds.catalog.category if ds.catalog.has_categories else None


def eval_envs(cfg: ExperimentConfig, ds: Dataset, eval_model: RewardModel):
    """Held-out truth where logged, the completion model elsewhere."""
    return make_envs(eval_model, ds.n_items, cfg.eval.n_envs, _category(cfg, ds), cfg.quit_rule(),
                     cfg.eval.max_steps, truth=ds.test.as_dict(), n_users=ds.n_users, seed=cfg.seed + 100)


def build_policy(cfg: ExperimentConfig, ds: Dataset):
    return make_policy(cfg.policy_config(), cfg.tracker, ds.n_users, ds.n_items)


def train_stage(cfg: ExperimentConfig, out=None) -> dict[str, float]:
    ds = load_data(cfg)
    d = out_dir(cfg, out)
    policy = build_policy(cfg, ds)
    tc = cfg.train_config()
    check_paradigm(policy, tc.paradigm)
    user_model = load_reward_model(d / USER_MODEL_FILE, _model_hash(cfg, "user_model"))
    eval_model = load_reward_model(d / EVAL_MODEL_FILE, _model_hash(cfg, "eval_model"))
    buffer = envs = None
    if tc.paradigm == "UserModel":
        envs = make_envs(user_model, ds.n_items, cfg.env.n_envs, _category(cfg, ds), cfg.quit_rule(),
                         cfg.env.max_steps, n_users=ds.n_users, seed=cfg.seed + 1)
    else:
        buffer = build_offline_buffer(ds.train, cfg.train.buffer_method, cfg.env.max_steps,
                                      cfg.train.buffer_window, seed=cfg.seed, n_items=ds.n_items)
    history = train(policy, tc, envs, buffer, eval_envs(cfg, ds, eval_model), cfg.eval_config(), ds.catalog,
                    user_model)
    meta = cfg.meta()
    save_policy(policy, d / POLICY_FILE, {"run_hash": meta["config_hash"], "seed": cfg.seed})
    write_history(history, d / HISTORY_FILE, meta)
    summary = summarize(history)
    write_summary(summary, d / SUMMARY_FILE, meta)
    _write_run_file(d, cfg)
    return summary


def evaluate_stage(cfg: ExperimentConfig, out=None, checkpoint=None):
    ds = load_data(cfg)
    d = out_dir(cfg, out)
    ckpt = Path(checkpoint) if checkpoint else d / POLICY_FILE
    if not ckpt.exists():
        raise InputError(f"policy checkpoint {ckpt} not found; run the train stage first")
    policy = load_policy(ckpt, expect=build_policy(cfg, ds))
    eval_model = load_reward_model(d / EVAL_MODEL_FILE, _model_hash(cfg, "eval_model"))
    user_model = load_reward_model(d / USER_MODEL_FILE, _model_hash(cfg, "user_model"))
    report = evaluate(policy, eval_envs(cfg, ds, eval_model), cfg.eval_config(), ds.catalog, user_model)
    meta = dict(cfg.meta(), mode=cfg.eval_config().label)
    write_summary(report.row(), d / EVAL_SUMMARY_FILE, meta)
    write_episodes(report, d / EPISODES_FILE, meta)
    return report


# ---------------------------------------------------------------------------
# reporting

CURVE_COLUMNS = ("R_cumu", "length", "R_avg")


def read_summary(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(ln for ln in fh if not ln.startswith("#")))
    return {k: float(v) for k, v in rows[1:]}


def report(run_dirs, out, render: bool = False) -> list[Path]:
    """Learning curves for every run plus the estimated-vs-true reward
    comparison grouped by the user model's number of negatives."""
    runs = []
    for rd in run_dirs:
        rd = Path(rd)
        if (rd / HISTORY_FILE).exists():
            runs.append(rd)
    if not runs:
        raise InputError(f"no {HISTORY_FILE} found in {[str(r) for r in run_dirs]}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    curves = out / "curves.csv"
    with curves.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "series", "epoch", "value"])
        for rd in runs:
            hist = read_history(rd / HISTORY_FILE)
            for col in CURVE_COLUMNS:
                for row in hist:
                    if col in row:
                        w.writerow([rd.name, col, row["epoch"], repr(row[col])])
    written.append(curves)

    groups: dict[int, list[tuple[float, float]]] = {}
    for rd in runs:
        info = json.loads((rd / RUN_FILE).read_text()) if (rd / RUN_FILE).exists() else {}
        s = read_summary(rd / SUMMARY_FILE) if (rd / SUMMARY_FILE).exists() else {}
        if "estimated_reward" in s and "n_negatives" in info:
            groups.setdefault(int(info["n_negatives"]), []).append((s["estimated_reward"], s["true_reward"]))
    if groups:
        over = out / "overestimation.csv"
        with over.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n_negatives", "estimated_reward", "true_reward", "gap"])
            for k in sorted(groups):
                est, tru = np.mean(groups[k], axis=0)
                w.writerow([k, repr(float(est)), repr(float(tru)), repr(float(est - tru))])
        written.append(over)
    if render:
        written += _render(out, runs, groups)
    return written


def _render(out: Path, runs, groups) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = []
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for rd in runs:
        hist = read_history(rd / HISTORY_FILE)
        for ax, col in zip(axes, CURVE_COLUMNS):
            pts = [(r["epoch"], r[col]) for r in hist if col in r]
            if pts:
                ax.plot(*zip(*pts), label=rd.name)
                ax.set_title(col)
                ax.set_xlabel("epoch")
    axes[0].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out / "curves.png", dpi=100)
    plt.close(fig)
    files.append(out / "curves.png")
    if groups:
        keys = sorted(groups)
        means = np.array([np.mean(groups[k], axis=0) for k in keys])
        x = np.arange(len(keys))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar(x - 0.2, means[:, 0], 0.4, label="estimated")
        ax.bar(x + 0.2, means[:, 1], 0.4, label="true")
        ax.set_xticks(x, [str(k) for k in keys])
        ax.set_xlabel("negative samples per record")
        ax.set_ylabel("mean reward")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "overestimation.png", dpi=100)
        plt.close(fig)
        files.append(out / "overestimation.png")
    return files
