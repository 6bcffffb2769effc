"""Training and evaluation executors plus the metric suite."""

from recrl.exec.metrics import (
    MetricReport, RLMetrics, compute_exposure_metrics, compute_rl_metrics, compute_user_model_metrics,
    episode_diversity, error_metrics, ranking_metrics,
)
from recrl.exec.runner import (
    EVAL_MODES, PARADIGMS, EvalConfig, TrainConfig, check_paradigm, evaluate, make_envs, parse_mode,
    read_history, summarize, train, write_episodes, write_history, write_summary,
)

__all__ = [
    "MetricReport", "RLMetrics", "compute_exposure_metrics", "compute_rl_metrics", "compute_user_model_metrics",
    "episode_diversity", "error_metrics", "ranking_metrics",
    "EVAL_MODES", "PARADIGMS", "EvalConfig", "TrainConfig", "check_paradigm", "evaluate", "make_envs",
    "parse_mode", "read_history", "summarize", "train", "write_episodes", "write_history", "write_summary",
]
