"""Block buffer with per-environment lanes, and offline buffer construction.

A lane is the time-ordered stream of blocks written by one environment. A
trajectory is a run of blocks from an ``is_start`` block to the next ``done``
block in the same lane, so trajectories never straddle lanes.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from recrl.data.dataset import InteractionLog
from recrl.env.environment import Observation
from recrl.errors import ConfigError, ContractViolation, DataError, DataFormatError
from recrl.policy.base import TransitionBatch
from recrl.policy.onpolicy import Trajectory

DEFAULT_CAPACITY = 100_000
CONSTRUCTION_METHODS = ("sequential", "convolution", "counterfactual")


@dataclass
class Block:
    env_id: int
    observation: Observation
    action: int
    reward: float
    done: bool
    is_start: bool
    logprob: float | None = None
    mask: np.ndarray | None = None  # allowed items when the action was chosen; None = all


class Buffer:
    def __init__(self, n_lanes: int = 1, capacity: int = DEFAULT_CAPACITY, n_items: int | None = None):
        if n_lanes < 1 or capacity < 1:
            raise ConfigError("buffer needs >= 1 lane and capacity >= 1")
        self.n_lanes = n_lanes
        self.capacity = capacity
        self.n_items = n_items
        self.lanes: list[deque[Block]] = [deque() for _ in range(n_lanes)]
        self._index: list[tuple[int, int]] | None = None

    def __len__(self) -> int:
        return sum(len(lane) for lane in self.lanes)

    def clear(self) -> None:
        for lane in self.lanes:
            lane.clear()
        self._index = None

    def append(self, block: Block) -> None:
        if not 0 <= block.env_id < self.n_lanes:
            raise ContractViolation(f"env_id {block.env_id} has no lane")
        lane = self.lanes[block.env_id]
        open_run = bool(lane) and not lane[-1].done
        if block.is_start == open_run:
            raise ContractViolation("is_start must be set exactly when the lane has no open trajectory")
        lane.append(block)
        self._index = None
        if len(lane) > self.capacity:
            self._evict(lane)

    def _evict(self, lane: deque) -> None:
        """Drop whole trajectories from the front until the lane fits."""
        while len(lane) > self.capacity:
            first_done = next((k for k, b in enumerate(lane) if b.done), None)
            if first_done is None:
                raise ConfigError(f"a single trajectory exceeds the lane capacity {self.capacity}")
            for _ in range(first_done + 1):
                lane.popleft()

    def add_trajectory(self, lane: int, obs, actions, rewards, logprobs=None, masks=None) -> None:
        n = len(actions)
        if n == 0:
            raise ContractViolation("empty trajectory")
        for t in range(n):
            self.append(Block(
                lane, obs[t], int(actions[t]), float(rewards[t]), done=t == n - 1, is_start=t == 0,
                logprob=None if logprobs is None else float(logprobs[t]),
                mask=None if masks is None else np.asarray(masks[t], dtype=bool),
            ))

    # -- transitions ----------------------------------------------------------
    def transition_index(self) -> list[tuple[int, int]]:
        """(lane, position) of every block whose successor state is known."""
        if self._index is None:
            idx = []
            for li, lane in enumerate(self.lanes):
                n = len(lane)
                for k, b in enumerate(lane):
                    if b.done or k + 1 < n:
                        idx.append((li, k))
            self._index = idx
        return self._index

    def n_transitions(self) -> int:
        return len(self.transition_index())


def extract_trajectories(buffer: Buffer) -> list[Trajectory]:
    """Complete start-to-done runs, lane by lane, oldest first."""
    out = []
    for lane in buffer.lanes:
        run: list[Block] = []
        for b in lane:
            if b.is_start:
                run = []
            run.append(b)
            if b.done:
                out.append(_to_trajectory(run, buffer.n_items))
                run = []
    return out


def _to_trajectory(run: list[Block], n_items: int | None) -> Trajectory:
    has_mask = any(b.mask is not None for b in run)
    masks = None
    if has_mask:
        masks = np.vstack([np.ones(n_items, dtype=bool) if b.mask is None else b.mask for b in run])
    logps = None if any(b.logprob is None for b in run) else np.array([b.logprob for b in run])
    return Trajectory(
        obs=[b.observation for b in run],
        actions=np.array([b.action for b in run], dtype=np.int64),
        rewards=np.array([b.reward for b in run], dtype=np.float64),
        masks=masks, logprobs=logps,
    )


def sample_batch(buffer: Buffer, batch_size: int, seed: int | np.random.Generator = 0) -> TransitionBatch:
    """Uniform draw, with replacement, over stored transitions."""
    index = buffer.transition_index()
    if not index:
        raise ContractViolation("cannot sample from a buffer with no complete transition")
    if batch_size < 1:
        raise ContractViolation("batch_size must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picks = rng.integers(0, len(index), size=batch_size)
    n_items = buffer.n_items
    obs, next_obs, acts, rews, dones, logps = [], [], [], [], [], []
    masks, next_masks = [], []
    any_mask = False
    for p in picks:
        li, k = index[p]
        lane = buffer.lanes[li]
        b = lane[k]
        nxt = None if b.done else lane[k + 1]
        obs.append(b.observation)
        next_obs.append(b.observation if nxt is None else nxt.observation)
        acts.append(b.action)
        rews.append(b.reward)
        dones.append(b.done)
        logps.append(np.nan if b.logprob is None else b.logprob)
        masks.append(b.mask)
        next_masks.append(None if nxt is None else nxt.mask)
        any_mask = any_mask or b.mask is not None or (nxt is not None and nxt.mask is not None)
    mask_arr = next_arr = None
    if any_mask:
        if n_items is None:
            raise ContractViolation("buffer with masks needs n_items")
        full = np.ones(n_items, dtype=bool)
        mask_arr = np.vstack([full if m is None else m for m in masks])
        next_arr = np.vstack([full if m is None else m for m in next_masks])
    logps = np.asarray(logps)
    return TransitionBatch(
        obs=obs, actions=np.asarray(acts), rewards=np.asarray(rews), dones=np.asarray(dones),
        next_obs=next_obs, masks=mask_arr, next_masks=next_arr,
        logprobs=None if np.isnan(logps).any() else logps,
    )


# ---------------------------------------------------------------------------
# offline construction


def user_sequences(log: InteractionLog) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Per user (ascending id): items and rewards in timestamp order."""
    out = []
    for u, pairs in sorted(log.user_sequences().items()):
        out.append((u, np.array([i for i, _ in pairs], dtype=np.int64), np.array([r for _, r in pairs])))
    return out


def build_offline_buffer(log: InteractionLog, method: str = "sequential", max_steps: int = 30,
                         window: int | None = None, seed: int = 0, n_items: int | None = None) -> Buffer:
    """Turn a log into trajectories.

    sequential: each user's time-ordered sequence, cut into chunks of ``max_steps``.
    convolution: sequential plus every sliding window of length 2..W (stride 1);
      W defaults to min(10, sequence length).
    counterfactual: each user's sequence shuffled (within the user) under
      ``seed``, then treated as sequential.
    """
    method = method.lower()
    if method not in CONSTRUCTION_METHODS:
        raise ConfigError(f"unknown construction method {method!r}; expected one of {CONSTRUCTION_METHODS}")
    if window is not None and window < 2:
        raise ConfigError(f"convolution window must be >= 2, got {window}")
    if max_steps < 1:
        raise ConfigError("max_steps must be >= 1")
    if len(log) == 0:
        raise DataError("cannot build a buffer from an empty log")
    rng = np.random.default_rng(seed)
    runs: list[tuple[int, np.ndarray, np.ndarray]] = []
    for u, items, rewards in user_sequences(log):
        if method == "counterfactual":
            perm = rng.permutation(len(items))
            items, rewards = items[perm], rewards[perm]
        for start in range(0, len(items), max_steps):
            runs.append((u, items[start : start + max_steps], rewards[start : start + max_steps]))
        if method == "convolution":
            w_max = min(10, len(items)) if window is None else window
            for w in range(2, min(w_max, len(items)) + 1):
                for start in range(len(items) - w + 1):
                    runs.append((u, items[start : start + w], rewards[start : start + w]))
    buf = Buffer(1, capacity=max(sum(len(r[1]) for r in runs), 1), n_items=n_items or log.n_items)
    for u, items, rewards in runs:
        obs, hist = [], []
        for i, r in zip(items, rewards):
            obs.append(Observation(int(u), tuple(hist)))
            hist.append((int(i), float(r)))
        buf.add_trajectory(0, obs, items, rewards)
    return buf


# ---------------------------------------------------------------------------
# serialization: header then length-prefixed blocks, lane-major

_MAGIC = b"RECRLBUF"
_VERSION = 1
_SCHEMA = b"env_id:u32 user:i64 hist:u32*(i64,f64) action:i64 reward:f64 done:u8 start:u8 logp:u8+f64 mask:u8+bits"


def save_buffer(buffer: Buffer, path) -> None:
    n_items = buffer.n_items or 0
    out = [_MAGIC, struct.pack("<IIQI", _VERSION, buffer.n_lanes, buffer.capacity, n_items),
           struct.pack("<I", len(_SCHEMA)), _SCHEMA]
    for lane in buffer.lanes:
        out.append(struct.pack("<Q", len(lane)))
        for b in lane:
            rec = _encode_block(b, n_items)
            out.append(struct.pack("<I", len(rec)))
            out.append(rec)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(out))


def _encode_block(b: Block, n_items: int) -> bytes:
    hist = b.observation.history
    parts = [struct.pack("<IqI", b.env_id, b.observation.user_id, len(hist))]
    if hist:
        parts.append(np.array([i for i, _ in hist], dtype="<i8").tobytes())
        parts.append(np.array([r for _, r in hist], dtype="<f8").tobytes())
    parts.append(struct.pack("<qdBB", b.action, b.reward, b.done, b.is_start))
    parts.append(struct.pack("<Bd", b.logprob is not None, 0.0 if b.logprob is None else b.logprob))
    if b.mask is None:
        parts.append(struct.pack("<B", 0))
    else:
        if len(b.mask) != n_items:
            raise ContractViolation("block mask length differs from buffer n_items")
        parts.append(struct.pack("<B", 1) + np.packbits(b.mask).tobytes())
    return b"".join(parts)


def load_buffer(path) -> Buffer:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataFormatError(f"cannot read buffer file {path}: {e}") from None
    if data[:8] != _MAGIC:
        raise DataFormatError(f"{path} is not a buffer file")
    try:
        version, n_lanes, capacity, n_items = struct.unpack_from("<IIQI", data, 8)
        if version != _VERSION:
            raise DataFormatError(f"unsupported buffer version {version}")
        pos = 8 + struct.calcsize("<IIQI")
        (n_schema,) = struct.unpack_from("<I", data, pos)
        pos += 4 + n_schema
        buf = Buffer(n_lanes, capacity, n_items or None)
        for _ in range(n_lanes):
            (count,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            for _ in range(count):
                (n,) = struct.unpack_from("<I", data, pos)
                pos += 4
                buf.append(_decode_block(data[pos : pos + n], n_items))
                pos += n
    except struct.error as e:
        raise DataFormatError(f"{path} is truncated or corrupt: {e}") from None
    return buf


def _decode_block(rec: bytes, n_items: int) -> Block:
    env_id, user, n_hist = struct.unpack_from("<IqI", rec, 0)
    pos = struct.calcsize("<IqI")
    items = np.frombuffer(rec, dtype="<i8", count=n_hist, offset=pos)
    pos += 8 * n_hist
    rewards = np.frombuffer(rec, dtype="<f8", count=n_hist, offset=pos)
    pos += 8 * n_hist
    action, reward, done, start = struct.unpack_from("<qdBB", rec, pos)
    pos += struct.calcsize("<qdBB")
    has_logp, logp = struct.unpack_from("<Bd", rec, pos)
    pos += struct.calcsize("<Bd")
    (has_mask,) = struct.unpack_from("<B", rec, pos)
    pos += 1
    mask = None
    if has_mask:
        mask = np.unpackbits(np.frombuffer(rec, dtype=np.uint8, offset=pos), count=n_items).astype(bool)
    hist = tuple((int(i), float(r)) for i, r in zip(items, rewards))
    return Block(env_id, Observation(int(user), hist), int(action), float(reward), bool(done), bool(start),
                 logprob=float(logp) if has_logp else None, mask=mask)
