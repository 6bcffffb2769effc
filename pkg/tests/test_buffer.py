from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recrl.buffer import (
    Block, Buffer, build_offline_buffer, extract_trajectories, load_buffer, sample_batch, save_buffer,
)
from recrl.collector import Collector, collect
from recrl.data.dataset import InteractionLog
from recrl.env import ChainEnv, Observation
from recrl.errors import ConfigError, ContractViolation, DataError, DataFormatError
from recrl.policy import RandomPolicy


def make_log(rows, n_users=None, n_items=None):
    users, items, rewards, ts = (np.array(c) for c in zip(*rows))
    return InteractionLog(users, items, rewards, ts,
                          n_users or int(users.max()) + 1, n_items or int(items.max()) + 1)


def five_step_log():
    # timestamps deliberately out of record order
    return make_log([(0, 4, 1.0, 50), (0, 1, 2.0, 10), (0, 3, 3.0, 40), (0, 0, 4.0, 20), (0, 2, 5.0, 30)])


def block(env, t, n, reward=1.0, action=0):
    return Block(env, Observation(env, ()), action, reward, done=t == n - 1, is_start=t == 0)


random_logs = st.lists(
    st.tuples(st.integers(0, 4), st.integers(0, 7), st.floats(0, 5), st.integers(0, 30)), min_size=1, max_size=60,
)


class TestBlocksAndLanes:
    def test_start_flag_enforced(self):
        buf = Buffer(2, 100, 3)
        with pytest.raises(ContractViolation):
            buf.append(block(0, 1, 3))  # continuation with nothing open
        buf.append(block(0, 0, 3))
        with pytest.raises(ContractViolation):
            buf.append(block(0, 0, 3))  # start while a run is open
        with pytest.raises(ContractViolation):
            buf.append(block(5, 0, 3))

    def test_interleaved_lanes(self):
        buf = Buffer(2, 100, 3)
        for b in (block(0, 0, 3), block(1, 0, 2), block(0, 1, 3), block(1, 1, 2), block(0, 2, 3)):
            buf.append(b)
        assert [len(t.actions) for t in extract_trajectories(buf)] == [3, 2]

    def test_incomplete_tail_excluded(self):
        buf = Buffer(1, 100, 3)
        for t in range(2):
            buf.append(block(0, t, 2))
        buf.append(block(0, 0, 5))
        assert len(extract_trajectories(buf)) == 1
        assert extract_trajectories(Buffer(1, 10)) == []

    def test_eviction_is_whole_trajectory(self):
        buf = Buffer(1, 5, 3)
        for n in (2, 3, 2, 3):
            for t in range(n):
                buf.append(block(0, t, n, reward=n))
                lane = buf.lanes[0]
                assert lane[0].is_start
                assert len(lane) <= 5
        assert [len(t.actions) for t in extract_trajectories(buf)] == [2, 3]

    def test_oversized_trajectory(self):
        buf = Buffer(1, 3, 3)
        with pytest.raises(ConfigError):
            for t in range(5):
                buf.append(block(0, t, 5))

    def test_lane_isolation(self):
        buf = Buffer(3, 1000, 3)
        rng = np.random.default_rng(0)
        open_len = [0, 0, 0]
        target = [0, 0, 0]
        for _ in range(600):
            e = int(rng.integers(3))
            if open_len[e] == 0:
                target[e] = int(rng.integers(1, 6))
            t = open_len[e]
            buf.append(Block(e, Observation(e, ((t, 0.0),)), e, float(e), done=t == target[e] - 1, is_start=t == 0))
            open_len[e] = 0 if t == target[e] - 1 else t + 1
        batch = sample_batch(buf, 2000, 1)
        for o, nxt, a, d in zip(batch.obs, batch.next_obs, batch.actions, batch.dones):
            assert o.user_id == nxt.user_id == a
            if not d:
                assert nxt.history[0][0] == o.history[0][0] + 1


class TestSampling:
    def test_single_transition(self):
        buf = Buffer(1, 10, 3)
        buf.append(Block(0, Observation(0, ()), 2, 1.5, done=True, is_start=True))
        b = sample_batch(buf, 4, 0)
        assert len(b) == 4 and list(b.actions) == [2] * 4 and b.dones.all()

    def test_empty(self):
        with pytest.raises(ContractViolation):
            sample_batch(Buffer(1, 10), 4)

    def test_open_last_block_is_not_a_transition(self):
        buf = Buffer(1, 10, 3)
        buf.append(block(0, 0, 3))
        with pytest.raises(ContractViolation):
            sample_batch(buf, 1)
        buf.append(block(0, 1, 3))
        assert buf.n_transitions() == 1

    def test_uniform_within_three_sigma(self):
        buf = Buffer(1, 100, 10)
        for a in range(10):
            buf.append(Block(0, Observation(0, ()), a, 0.0, done=True, is_start=True))
        counts = np.bincount(sample_batch(buf, 100_000, 7).actions, minlength=10)
        sigma = np.sqrt(100_000 * 0.1 * 0.9)
        assert np.all(np.abs(counts - 10_000) < 3 * sigma)

    def test_deterministic_under_seed(self):
        buf = build_offline_buffer(five_step_log(), "convolution")
        a, b = sample_batch(buf, 50, 3), sample_batch(buf, 50, 3)
        np.testing.assert_array_equal(a.actions, b.actions)
        assert a.obs == b.obs


class TestCollect:
    def test_episode_target_is_exact(self):
        envs = [ChainEnv(4, 10, seed=k) for k in range(3)]
        buf = Buffer(3, 10_000, 2)
        stats = collect(RandomPolicy(2, 0), envs, buf, n_episodes=100)
        assert stats.episodes == 100
        assert len(extract_trajectories(buf)) == 100
        stored = sum(b.reward for lane in buf.lanes for b in lane)
        assert stats.rewards == pytest.approx(stored)
        assert sum(t.rewards.sum() for t in extract_trajectories(buf)) == pytest.approx(sum(stats.episode_returns))

    def test_single_env_structure(self):
        buf = Buffer(1, 100, 2)
        stats = collect(RandomPolicy(2, 1), [ChainEnv(3, 6)], buf, n_episodes=1)
        lane = list(buf.lanes[0])
        assert len(lane) == stats.steps == stats.episode_lengths[0]
        assert lane[0].is_start and lane[-1].done
        assert not any(b.is_start for b in lane[1:]) and not any(b.done for b in lane[:-1])

    def test_step_budget_resumes(self):
        col = Collector([ChainEnv(5, 20)], Buffer(1, 1000, 2))
        s1 = col.collect(RandomPolicy(2, 0), n_steps=3)
        s2 = col.collect(RandomPolicy(2, 0), n_steps=40)
        assert s1.steps == 3 and s2.steps == 40
        assert len(col.buffer) == 43

    def test_zero_target(self):
        with pytest.raises(ContractViolation):
            collect(RandomPolicy(2, 0), [ChainEnv()], n_episodes=0)
        with pytest.raises(ContractViolation):
            collect(RandomPolicy(2, 0), [ChainEnv()])


class TestOfflineConstruction:
    def test_sequential_single_user(self):
        trajs = extract_trajectories(build_offline_buffer(five_step_log(), "sequential", max_steps=30))
        assert len(trajs) == 1
        assert list(trajs[0].actions) == [1, 0, 2, 3, 4]
        assert trajs[0].obs[2] == Observation(0, ((1, 2.0), (0, 4.0)))

    def test_chunking(self):
        trajs = extract_trajectories(build_offline_buffer(five_step_log(), "sequential", max_steps=2))
        assert [len(t.actions) for t in trajs] == [2, 2, 1]
        assert trajs[1].obs[0].history == ()

    def test_convolution_window_count(self):
        trajs = extract_trajectories(build_offline_buffer(five_step_log(), "convolution", window=3))
        assert len(trajs) == 8
        lengths = Counter(len(t.actions) for t in trajs)
        assert lengths == Counter({5: 1, 2: 4, 3: 3})

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 15), st.integers(2, 12))
    def test_convolution_count_formula(self, n, w):
        log = make_log([(0, i % 4, float(i), i) for i in range(n)])
        trajs = extract_trajectories(build_offline_buffer(log, "convolution", max_steps=100, window=w))
        expect = 1 + sum(n - k + 1 for k in range(2, min(w, n) + 1))
        assert len(trajs) == expect

    def test_counterfactual_seeds(self):
        log = make_log([(u, i, float(i + u), t) for u in range(3) for t, i in enumerate(range(8))])
        a = extract_trajectories(build_offline_buffer(log, "counterfactual", seed=1))
        b = extract_trajectories(build_offline_buffer(log, "counterfactual", seed=1))
        c = extract_trajectories(build_offline_buffer(log, "counterfactual", seed=2))
        assert all(np.array_equal(x.actions, y.actions) for x, y in zip(a, b))
        assert any(not np.array_equal(x.actions, y.actions) for x, y in zip(a, c))

        def triples(ts):
            return Counter((t.obs[0].user_id, int(i), float(r)) for t in ts for i, r in zip(t.actions, t.rewards))

        assert triples(a) == triples(c)

    def test_errors(self):
        with pytest.raises(ConfigError):
            build_offline_buffer(five_step_log(), "convolution", window=1)
        with pytest.raises(ConfigError):
            build_offline_buffer(five_step_log(), "shuffle")
        empty = InteractionLog([], [], [], [], 1, 1)
        with pytest.raises(DataError):
            build_offline_buffer(empty)

    @settings(max_examples=50, deadline=None)
    @given(random_logs, st.integers(1, 6))
    def test_conservation(self, rows, max_steps):
        log = make_log(rows, 5, 8)
        want = Counter((int(u), int(i), float(r)) for u, i, r in zip(log.users, log.items, log.rewards))
        for method in ("sequential", "counterfactual"):
            trajs = extract_trajectories(build_offline_buffer(log, method, max_steps=max_steps, seed=3))
            got = Counter((t.obs[0].user_id, int(i), float(r)) for t in trajs for i, r in zip(t.actions, t.rewards))
            assert got == want
        # convolution: the base chunks come first for each user, followed by its windows
        trajs = extract_trajectories(build_offline_buffer(log, "convolution", max_steps=max_steps))
        seq = extract_trajectories(build_offline_buffer(log, "sequential", max_steps=max_steps))
        base = Counter()
        k = 0
        for t in trajs:
            if k < len(seq) and t.obs[0].user_id == seq[k].obs[0].user_id and np.array_equal(t.actions, seq[k].actions):
                base.update((t.obs[0].user_id, int(i), float(r)) for i, r in zip(t.actions, t.rewards))
                k += 1
        assert k == len(seq) and base == want

    @settings(max_examples=50, deadline=None)
    @given(random_logs)
    def test_sequential_matches_sort_and_group(self, rows):
        log = make_log(rows, 5, 8)
        groups = {}
        for u, i, r, t in sorted(rows, key=lambda x: (x[0], x[3], x[1])):
            groups.setdefault(u, []).append((i, float(r)))
        trajs = extract_trajectories(build_offline_buffer(log, "sequential", max_steps=1000))
        got = {t.obs[0].user_id: list(zip(t.actions.tolist(), t.rewards.tolist())) for t in trajs}
        assert got == groups


class TestSerialization:
    def test_round_trip(self, tmp_path):
        buf = Buffer(2, 100, 4)
        buf.add_trajectory(0, [Observation(1, ()), Observation(1, ((2, 3.5),))], [2, 3], [3.5, 1.0],
                           logprobs=[-0.5, -1.5], masks=[[1, 1, 1, 0], [1, 0, 1, 1]])
        buf.add_trajectory(1, [Observation(0, ())], [0], [2.0])
        buf.append(Block(1, Observation(0, ((0, 2.0),)), 1, 0.5, done=False, is_start=True))
        path = tmp_path / "b.bin"
        save_buffer(buf, path)
        back = load_buffer(path)
        assert back.n_lanes == 2 and back.n_items == 4
        for la, lb in zip(buf.lanes, back.lanes):
            assert len(la) == len(lb)
            for x, y in zip(la, lb):
                assert (x.env_id, x.observation, x.action, x.reward, x.done, x.is_start, x.logprob) == \
                       (y.env_id, y.observation, y.action, y.reward, y.done, y.is_start, y.logprob)
                assert (x.mask is None and y.mask is None) or np.array_equal(x.mask, y.mask)

    def test_offline_round_trip(self, tmp_path):
        buf = build_offline_buffer(five_step_log(), "convolution")
        save_buffer(buf, tmp_path / "c.bin")
        a = sample_batch(buf, 20, 0)
        b = sample_batch(load_buffer(tmp_path / "c.bin"), 20, 0)
        assert a.obs == b.obs and np.array_equal(a.rewards, b.rewards)

    def test_corrupt(self, tmp_path):
        buf = build_offline_buffer(five_step_log(), "sequential")
        path = tmp_path / "c.bin"
        save_buffer(buf, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(DataFormatError):
            load_buffer(path)
        path.write_bytes(b"garbage!" * 4)
        with pytest.raises(DataFormatError):
            load_buffer(path)
