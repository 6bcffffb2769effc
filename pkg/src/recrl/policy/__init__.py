"""Policies: action selection with masking plus on-policy, off-policy and batch learners."""

from __future__ import annotations

from dataclasses import asdict

from recrl.checkpoint import config_hash, load_checkpoint, save_checkpoint
from recrl.errors import CheckpointError, ContractViolation
from recrl.policy.base import (
    RandomPolicy,
    BATCH_RL, OFF_POLICY, ON_POLICY, POLICY_KINDS, Policy, PolicyConfig, TransitionBatch,
    discounted_returns, map_continuous_action, masked_argmax, masked_softmax, select_from_scores,
)
from recrl.policy.batchrl import BCQ, CQL, CRR, SQN
from recrl.policy.offpolicy import DDPG, DQN
from recrl.policy.onpolicy import A2C, PG, PPO, Trajectory, batch_from_trajectories
from recrl.tracker import TrackerConfig

_CLASSES = {c.kind: c for c in (PG, A2C, PPO, DQN, DDPG, BCQ, CQL, CRR, SQN)}


def make_policy(config: PolicyConfig, tracker_config: TrackerConfig, n_users: int, n_items: int) -> Policy:
    return _CLASSES[config.kind](config, tracker_config, n_users, n_items)


def policy_meta(policy: Policy) -> dict:
    meta = {
        "policy": policy.config.as_dict(),
        "tracker": asdict(policy.tracker_config),
        "n_users": policy.n_users,
        "n_items": policy.n_items,
    }
    meta["config_hash"] = config_hash(meta)
    return meta


def save_policy(policy: Policy, path, extra_meta: dict | None = None) -> None:
    meta = policy_meta(policy)
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, policy.state_dict(), meta)


def load_policy(path, expect: Policy | None = None) -> Policy:
    """Rebuild a policy from a checkpoint; with ``expect`` the stored
    configuration must match that policy's exactly."""
    meta, arrays = load_checkpoint(path)
    try:
        pc = PolicyConfig(**meta["policy"])
        tc = TrackerConfig(**meta["tracker"])
        policy = make_policy(pc, tc, int(meta["n_users"]), int(meta["n_items"]))
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint metadata incomplete: {e}") from None
    if expect is not None and policy_meta(expect)["config_hash"] != meta.get("config_hash"):
        raise CheckpointError("checkpoint was written for a different policy configuration")
    try:
        policy.load_state_dict(arrays)
    except ContractViolation as e:
        raise CheckpointError(str(e)) from None
    return policy


__all__ = [
    "BATCH_RL", "OFF_POLICY", "ON_POLICY", "POLICY_KINDS", "Policy", "PolicyConfig", "TransitionBatch",
    "Trajectory", "batch_from_trajectories", "discounted_returns", "map_continuous_action", "masked_argmax",
    "masked_softmax", "select_from_scores", "make_policy", "save_policy", "load_policy", "policy_meta",
    "PG", "A2C", "PPO", "DQN", "DDPG", "BCQ", "CQL", "CRR", "SQN", "RandomPolicy",
]
